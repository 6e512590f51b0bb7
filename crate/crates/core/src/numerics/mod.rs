//! Dense tensors, forward kernels and reverse-mode autograd.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use kernels::{add, exp, matmul, matmul_nt, mul, rmsnorm, silu, softmax, softplus, top_k};
pub use tape::{AttnDims, Gradients, Tape, Var};
pub use tensor::{DType, Real, Rng, Tensor};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}
