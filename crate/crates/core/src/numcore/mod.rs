//! Minimal reverse-mode differentiable tensor engine.
//!
//! Double precision throughout, single-threaded, with fixed reduction order so
//! that a run is bit-reproducible for a given seed.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_global_norm, global_norm, Adam};
pub use tensor::{gelu, log_sigmoid, log_softmax_slice, log_sum_exp, sigmoid, softmax_slice, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{len} values do not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: expected {expected} indices, got {got}")]
    IndexLength { op: &'static str, expected: usize, got: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value at parameter {param}, coordinate {coordinate}")]
    NonFinite { param: usize, coordinate: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

impl NumError {
    pub(crate) fn shape(op: &'static str, left: &Tensor, right: &Tensor) -> Self {
        NumError::ShapeMismatch { op, left: left.shape().to_vec(), right: right.shape().to_vec() }
    }
}
