//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by matrix, model, adapter, and pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix or model dimensions. The message names both shapes.
    #[error("shape: {0}")]
    Shape(String),

    /// A requested rank is outside the valid range for the operand.
    #[error("rank: {0}")]
    Rank(String),

    /// Input data failed validation (non-finite entries, bad lengths, single-class labels).
    #[error("validation: {0}")]
    Validation(String),

    /// A component was asked to do something its configuration does not support.
    #[error("config: {0}")]
    Config(String),

    /// Malformed on-disk data (bad magic, truncated payload, unparsable manifest).
    #[error("format: {0}")]
    Format(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn rank(msg: impl Into<String>) -> Self {
        Error::Rank(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable one-word category, used by the CLI for machine-parsable failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Rank(_) => "rank",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
