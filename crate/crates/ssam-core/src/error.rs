//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SsamError {
    /// Tensor or sequence dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A parameter is out of its documented domain (non-finite, nonpositive, ...).
    #[error("invalid parameter: {0}")]
    Param(String),
    /// Patch geometry does not tile the input exactly.
    #[error("geometry error: {0}")]
    Geometry(String),
    /// Unusable input data (missing files, bad labels, wrong sample rate, ...).
    #[error("data error: {0}")]
    Data(String),
    /// A serialized artifact (container, checkpoint, config) is malformed.
    #[error("format error: {0}")]
    Format(String),
    /// A score-table task has max == min, so min-max normalization is undefined.
    #[error("degenerate task '{task}': max equals min")]
    DegenerateTask { task: String },
    /// A checked numerical invariant failed at runtime.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SsamError>;
