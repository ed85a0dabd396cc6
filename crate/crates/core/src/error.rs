//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or feature-map shapes do not line up.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An index points outside its container.
    #[error("index {index} out of range for length {len} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    /// A size precondition was violated (e.g. k-NN with k >= n).
    #[error("size error in {op}: {detail}")]
    Size { op: &'static str, detail: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A call-contract precondition was violated.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A dataset file is missing or malformed.
    #[error("ingestion error for {path}: {detail}")]
    Ingestion { path: PathBuf, detail: String },

    /// Stored data does not match the expected schema.
    #[error("schema error for {path}: {detail}")]
    Schema { path: PathBuf, detail: String },

    /// Checkpoint does not match the model it is loaded into.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// Training diverged (NaN or infinite loss).
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn size(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Size {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}
