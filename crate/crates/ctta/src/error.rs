use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the adaptation laboratory.
#[derive(Debug, Error)]
pub enum CttaError {
    /// Tensor shapes incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A value violated an operation's precondition.
    #[error("invalid input to {op}: {detail}")]
    InvalidInput { op: &'static str, detail: String },

    /// A NaN or infinity appeared where the contract requires finite values.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Configuration file could not be read or parsed.
    #[error("config error ({path}): {detail}")]
    Config { path: PathBuf, detail: String },

    /// Checkpoint file malformed or version not understood.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CttaError>;

impl CttaError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CttaError::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        CttaError::InvalidInput { op, detail: detail.into() }
    }
}
