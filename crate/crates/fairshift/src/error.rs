//! Error type shared by all modules.

use thiserror::Error;

/// Errors produced by generators, solvers, and report builders.
#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a precondition (shape mismatch, invalid parameter, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A file did not match the expected schema.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A numerical routine failed (singular system, non-convergence,
    /// non-finite objective).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation is not defined for the given model family.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
