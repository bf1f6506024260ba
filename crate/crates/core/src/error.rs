//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset handling, training, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or batch dimensions do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// An operation that needs at least one element got none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A required column is missing from a CSV header.
    #[error("missing column {column:?} in {file}")]
    MissingColumn { column: String, file: String },

    /// Training diverged (loss became non-finite or exploded).
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A referenced checkpoint or dataset file does not exist.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// A checkpoint or dataset file has an unrecognized or corrupt layout.
    #[error("bad artifact format in {file}: {reason}")]
    BadArtifact { file: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
