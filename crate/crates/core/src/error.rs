use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid hyperparameter or structural configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Caller broke an API precondition (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset validation failure, tagged with the offending record.
    #[error("{kind} #{index}: {message}")]
    Record {
        kind: &'static str,
        index: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
