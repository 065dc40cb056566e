use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the pipeline.
///
/// `Parse` and `Validation` map to bad input; everything else is a runtime
/// failure (the CLI uses this split for its exit codes).
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite {term} loss at epoch {epoch}, patient {patient}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        patient: usize,
    },

    #[error("gradient check failed for group(s): {0}")]
    GradientCheck(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from malformed or out-of-contract input.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Validation(_) | Error::Shape(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
