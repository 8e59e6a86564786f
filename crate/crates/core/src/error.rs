use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the simulation framework.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a mathematical or geometric precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A document could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A parsed value violated a documented invariant.
    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    /// A numeric routine hit a singular or ill-conditioned system.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("no route from lane `{from}` to lane `{to}`")]
    NoRoute { from: String, to: String },

    /// A message sequence violated the platooning protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A replay log failed its integrity checks.
    #[error("integrity error at line {line}: {message}")]
    Integrity { line: usize, message: String },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
