//! Dense f64 tensors, a reverse-mode tape, parameter storage, optimizers,
//! checkpoints and seeded initialization.
//!
//! Every reduction runs sequentially left-to-right so that a given build
//! produces bitwise-identical results for identical inputs.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{Graph, Gradients, Var};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

/// Numerically stable softmax over a non-empty vector.
pub fn softmax(x: &[f64]) -> crate::Result<Vec<f64>> {
    crate::error::ensure!(!x.is_empty(), "softmax of an empty vector");
    let mut out = vec![0.0; x.len()];
    kernels::softmax_into(x, &mut out);
    Ok(out)
}
