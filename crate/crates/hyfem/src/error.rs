//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, data handling, and the federation
/// loop.
#[derive(Debug, Error)]
pub enum Error {
    /// Structural problem: tensor shapes or layer widths disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value violates an operation's precondition (bad label, negative
    /// separation, non-finite cost, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A local head has more hidden neurons than the global head can absorb.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Dataset file does not match the declared feature schema.
    #[error("schema mismatch: {0}")]
    Schema(String),

    /// Malformed dataset row. Lines are 1-based.
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    /// Bad run configuration; `key` is the dotted config key path.
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
