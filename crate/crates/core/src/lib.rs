//! Depthwise-separable document-layout detection with focal and global
//! feature distillation, a COCO-style dataset layer, a synthetic datasheet
//! page generator and a COCO-protocol evaluator.

pub mod backbone;
pub mod bbox;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod evaluation;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
