//! Dense matrices, reverse-mode gradients and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod graph;
mod matrix;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, NodeId, ParamId};
pub use matrix::Matrix;

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
