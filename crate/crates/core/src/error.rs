//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor/graph shape did not validate; `node` identifies the offender.
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    /// A non-finite value appeared during evaluation.
    #[error("non-finite value at {node}: {detail}")]
    Numeric { node: String, detail: String },

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data failed validation.
    #[error("invalid input: {0}")]
    Validation(String),

    /// A run configuration is missing or malformed.
    #[error("config error: {0}")]
    Config(String),

    /// A binary file (IDX, checkpoint) failed to parse.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub fn numeric(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
