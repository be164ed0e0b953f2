//! Dense tensors, a reverse-mode tape, optimizers and the finite-difference
//! gradient oracle.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod param;
mod tensor;

pub use gradcheck::{grad_check, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{CustomOp, Graph, Var};
pub use kernels::{conv1d, cosine_matrix, layer_norm, matmul, silu, softmax, softplus};
pub use optim::{Adam, Optimizer, Sgd};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Gaussian tensor with the given standard deviation.
pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}
