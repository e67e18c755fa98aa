//! Dense `f64` tensors, a reverse-mode tape, a seeded random stream and Adam.

mod adam;
mod gradcheck;
mod graph;
mod linear;
mod params;
mod rng;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState, StoredAdam};
pub use gradcheck::{finite_diff_check, finite_diff_check_params, relative_error, GradCheck};
pub use graph::{sigmoid_scalar, softplus_scalar, Graph, Var};
pub use linear::Linear;
pub use params::{ParamId, ParamStore, StoredTensor};
pub use rng::Rng;
pub use tensor::Tensor;

use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameter-free layer normalisation over the last axis.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = g.layer_norm(v, eps)?;
    Ok(g.tensor(y))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = g.sigmoid(v);
    g.tensor(y)
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = g.softmax(v, axis)?;
    Ok(g.tensor(y))
}

pub fn log_sum_exp(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = g.log_sum_exp(v, axis)?;
    Ok(g.tensor(y))
}
