//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by dataset handling, sampling, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed arguments (index out of range, shape mismatch, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Inconsistent configuration (bad hyperparameter, unknown mode, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset cannot satisfy a sampling request.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Non-finite values encountered during training or inference.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn dataset(msg: impl Into<String>) -> Self {
        Error::Dataset(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
