//! Binary checkpoint layout:
//!
//! ```text
//! b"EDOC" | version: u8 | header_len: u32 LE | header: JSON | data: f32 LE
//! ```
//!
//! The header carries free-form metadata, the model spec and, per tensor, its
//! name, shape and byte offset into the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EDOC";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
}

/// A model with its metadata, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(model: Model<f32>, meta: serde_json::Value) -> Self {
        Checkpoint { model, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.model.params().len());
        let mut offset = 0;
        for p in self.model.params().iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += 4 * p.value.numel();
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            spec: self.model.spec().clone(),
            tensors,
        })?;
        let header_len = u32::try_from(header.len()).map_err(|_| corrupt("header larger than 4 GiB"))?;
        let mut out = Vec::with_capacity(9 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.model.params().iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(corrupt("not an EDOC checkpoint (bad magic)"));
        }
        if bytes[4] != VERSION {
            return Err(corrupt(format!(
                "unsupported checkpoint version {} (expected {VERSION})",
                bytes[4]
            )));
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let data_start = 9usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[9..data_start])?;
        let data = &bytes[data_start..];
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let len = t.shape.iter().product::<usize>() * 4;
            if t.offset != expected_offset || t.offset + len > data.len() {
                return Err(corrupt(format!("tensor {:?} lies outside the data section", t.name)));
            }
            let values = data[t.offset..t.offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset += len;
            tensors.push((t.name, Tensor::new(t.shape, values)?));
        }
        if expected_offset != data.len() {
            return Err(corrupt(format!(
                "{} trailing bytes after the last tensor",
                data.len() - expected_offset
            )));
        }
        let mut model = Model::<f32>::build(header.spec, 0)?;
        model.params_mut().load_values(tensors)?;
        Ok(Checkpoint {
            model,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
