//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! The op set is deliberately small: what the propagation objective and the
//! three networks need, plus a differentiable LU-based linear solve and a
//! per-row gradient-scale hook on tape nodes.

mod linalg;
mod param;
mod tape;
mod tensor;

#[cfg(test)]
pub(crate) mod fd;

use thiserror::Error;

pub use linalg::{condition_estimate, Lu};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, NodeId, OpKind, Tape, DEFAULT_CONDITION_LIMIT};
pub use tensor::Tensor;

pub(crate) use tape::softmax_rows;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("singular system{} (condition estimate {condition:.3e})", batch.map(|b| format!(" at batch {b}")).unwrap_or_default())]
    SingularSystem { batch: Option<usize>, condition: f64 },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("gradient scale has {found} entries for a node with {expected} rows")]
    ScaleLength { expected: usize, found: usize },
    #[error("gradient scale value {0} outside [0, 1]")]
    ScaleRange(f64),
}
