//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every model in the crate (LightGCN/BPR, the MoE adapter, the toy LM) is
//! written against [`Tape`]. Parameters enter a tape as leaves; a leaf
//! whose tensor has `requires_grad == false` is treated as frozen and never
//! receives a gradient. Gradients accumulate when a leaf is consumed more
//! than once, which is how an injected vector that is read at every LM
//! layer collects the sum of its per-layer gradients.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Op, OpKind, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: OpKind, expected: usize, got: usize },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: OpKind, index: usize, bound: usize },
    #[error("{op}: input {value} outside the domain")]
    Domain { op: OpKind, value: f64 },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable {0} is not on this tape")]
    NotOnTape(usize),
}
