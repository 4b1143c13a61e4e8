//! Reverse-mode differentiation, gradient checking and the Adam optimizer.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{evaluate, finite_diff_check, Evaluation, GradCheckReport, LeafReport, Objective};
pub use graph::{Gradients, Graph, Var, MASK_NEG};
pub use optim::{cosine_lr, AdamState};
pub use tensor::{cosine_flat, Real, Tensor};

pub(crate) use graph::sigmoid;
#[cfg(test)]
pub(crate) use graph::CORRUPT_SIGMOID;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward needs a single-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("element count mismatch: {left} vs {right}")]
    ElementCount { left: usize, right: usize },
    #[error("objective: {0}")]
    Objective(String),
}
