//! Dense `f64` tensors with a define-by-run tape for reverse-mode differentiation.

mod kernels;
mod tape;
mod tensor;

pub use kernels::ConvGeom;
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("slice [{start}, {end}) on axis {axis} out of range for shape {shape:?}")]
    Slice {
        axis: usize,
        start: usize,
        end: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: needs at least one input")]
    Empty { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
    #[error("node {node} depends on a later node")]
    Cycle { node: usize },
    #[error("{op}: backward returned {got} gradients for {expected} inputs")]
    CustomArity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}
