use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::tensor::OptimizerRule;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Weights of the objectness, class and box parts of the detection loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub objectness: f64,
    pub class: f64,
    #[serde(rename = "box")]
    pub box_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            objectness: 1.0,
            class: 1.0,
            box_l1: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `teacher` or `student`.
    pub model: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Only used by SGD.
    pub momentum: f64,
    pub seed: u64,
    /// Square network input side in pixels.
    pub input_size: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub loss: LossWeights,
    pub distill: DistillConfig,
}

impl TrainConfig {
    /// Desk-scale defaults for `model`.
    pub fn new(model: &str) -> Self {
        TrainConfig {
            model: model.to_string(),
            epochs: 10,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            seed: 0,
            input_size: 64,
            max_steps: None,
            loss: LossWeights::default(),
            distill: DistillConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("train.{key}: {why}")));
        if self.model != "teacher" && self.model != "student" {
            return bad("model", "expected \"teacher\" or \"student\"");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be ≥ 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be a positive number");
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.input_size == 0 {
            return bad("input_size", "must be positive");
        }
        for (key, w) in [
            ("objectness", self.loss.objectness),
            ("class", self.loss.class),
            ("box", self.loss.box_l1),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss.{key}: must be finite and ≥ 0")));
            }
        }
        self.distill.validate()
    }

    pub fn optimizer_rule(&self) -> OptimizerRule {
        match self.optimizer {
            OptimizerKind::Adam => OptimizerRule::adam(self.lr),
            OptimizerKind::Sgd => OptimizerRule::Sgd {
                lr: self.lr,
                momentum: self.momentum,
            },
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    model: String,
    epochs: usize,
    batch_size: usize,
    #[serde(default)]
    optimizer: OptimizerKind,
    lr: f64,
    #[serde(default = "default_momentum")]
    momentum: f64,
    seed: u64,
    #[serde(default = "default_input")]
    input_size: usize,
    #[serde(default)]
    max_steps: Option<usize>,
    #[serde(default)]
    teacher: Option<PathBuf>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_input() -> usize {
    64
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    train: PathBuf,
    #[serde(default)]
    val: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    train: TrainSection,
    #[serde(default)]
    loss: LossWeights,
    #[serde(default)]
    distill: DistillConfig,
    data: DataSection,
}

/// A parsed run file: training settings plus the paths it references,
/// resolved against the file's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_annotations: PathBuf,
    pub val_annotations: Option<PathBuf>,
    /// Teacher checkpoint, required by distillation.
    pub teacher: Option<PathBuf>,
}

const REQUIRED: [&str; 6] = [
    "train.model",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.seed",
    "data.train",
];

impl RunConfig {
    /// Parses TOML text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for key in REQUIRED {
            let (section, field) = key.split_once('.').expect("dotted key");
            let present = table
                .get(section)
                .and_then(|s| s.as_table())
                .is_some_and(|s| s.contains_key(field));
            if !present {
                return Err(Error::Config(format!("missing required key `{key}`")));
            }
        }
        for (section, value) in &table {
            if !["train", "loss", "distill", "data"].contains(&section.as_str()) {
                return Err(Error::Config(format!("unknown section `{section}`")));
            }
            if !value.is_table() {
                return Err(Error::Config(format!("`{section}` must be a table")));
            }
        }
        let file: RunFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let train = TrainConfig {
            model: file.train.model,
            epochs: file.train.epochs,
            batch_size: file.train.batch_size,
            optimizer: file.train.optimizer,
            lr: file.train.lr,
            momentum: file.train.momentum,
            seed: file.train.seed,
            input_size: file.train.input_size,
            max_steps: file.train.max_steps,
            loss: file.loss,
            distill: file.distill,
        };
        train.validate()?;
        Ok(RunConfig {
            train,
            train_annotations: resolve(file.data.train),
            val_annotations: file.data.val.map(resolve),
            teacher: file.train.teacher.map(resolve),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}
