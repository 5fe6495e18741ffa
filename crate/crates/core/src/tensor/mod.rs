//! Minimal dense tensors with reverse-mode differentiation.
//!
//! Values live in `f32`. Every kernel is generic over [`Scalar`] so the same
//! code runs in `f64` for finite-difference gradient checks.

mod dense;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
pub(crate) mod shape;

pub use dense::Tensor;
pub use graph::{Activation, BinaryKind, ConvOpts, Graph, ReduceKind, Var};
pub use optim::{Optimizer, OptimizerRule};
pub use params::{Param, ParamSet};
pub use scalar::Scalar;

pub(crate) use graph::sigmoid;

#[cfg(test)]
mod tests;
