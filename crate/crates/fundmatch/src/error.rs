//! Error type shared across the crate, with process exit codes for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or graph-structure mismatch (programming/config error).
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Bad argument or configuration value.
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite value produced or encountered during computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 1 usage/config, 2 data/schema/io, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::InvalidArg(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
