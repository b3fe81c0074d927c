//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    Dimension {
        context: &'static str,
        left: String,
        right: String,
    },
    #[error("index out of range: {0}")]
    Index(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("training diverged at round {round}: {message}")]
    Divergence { round: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(context: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Dimension {
            context,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
