use thiserror::Error;

use crate::diff::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("empty text")]
    EmptyText,
    #[error("prompt length {len} outside 1..={max}")]
    PromptLength { len: usize, max: usize },
    #[error("image {height}x{width} is not square or not divisible by patch size {patch}")]
    ImageShape {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{what}: expected unit-norm rows (norm {norm})")]
    NotUnitNorm { what: &'static str, norm: f64 },
    #[error("{what}: length {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("empty object name")]
    EmptyObjectName,
    #[error("empty shot list")]
    NoShots,
    #[error("auroc needs both positive and negative labels")]
    SingleClass,
    #[error("non-finite {what} at epoch {epoch}, sample {sample}")]
    NonFiniteLoss {
        what: &'static str,
        epoch: usize,
        sample: usize,
    },
    #[error("could not place defect after {0} tries")]
    DefectPlacement(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
