//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no backward rule registered for op '{op}'")]
    MissingBackwardRule { op: String },

    #[error("memory ledger underflow in category {category}: freeing {delta} bytes with only {current} allocated ({label})")]
    LedgerUnderflow {
        category: &'static str,
        delta: u64,
        current: u64,
        label: String,
    },

    #[error("cosine similarity undefined: operand has zero norm")]
    ZeroNorm,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
