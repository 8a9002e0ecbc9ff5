//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar or array argument violated an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration field failed validation.
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// Source training finished below the required accuracy.
    #[error("training did not converge: accuracy {accuracy:.4} is below the required {required:.4}")]
    NonConvergence { accuracy: f64, required: f64 },

    /// A serialized file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
