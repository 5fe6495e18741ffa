//! Depthwise-separable + SE detector backbone, neck tap and dense head.

mod blocks;
pub mod head;
mod model;
mod spec;

pub use blocks::{dws_block_forward, se_forward, BlockVars, SeVars};
pub use head::{decode_detections, encode_targets, nms, DecodeParams, Detection, HeadTargets};
pub use model::{ForwardOutput, Model};
pub use spec::{make_divisible, BlockSpec, HeadSpec, ModelSpec, StemSpec, NUM_CLASSES};
