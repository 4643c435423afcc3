//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointMeta, EncodedTensor, OptimizerSnapshot};
pub use graph::{smooth_l1_value, Graph, OpKind, ParamSet, Var};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    InvalidAxis {
        op: OpKind,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: OpKind, index: usize, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: OpKind },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("tensors of rank > 2 are not supported (shape {shape:?})")]
    Rank { shape: Vec<usize> },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("backward needs a one-element loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,
    #[error("gradients requested before backward")]
    NoBackward,
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("optimizer state for '{name}' has {state} elements, parameter has {param}")]
    StateMismatch {
        name: String,
        state: usize,
        param: usize,
    },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}
