use std::path::PathBuf;

/// Crate-wide error type. `Validation` maps to CLI exit code 1, everything
/// else to 2.
#[derive(Debug, thiserror::Error)]
pub enum UvError {
    #[error("invalid {what}: {why}")]
    Validation { what: String, why: String },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("checkpoint {path}: {why}")]
    Checkpoint { path: PathBuf, why: String },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("{0}")]
    Runtime(String),
}

impl UvError {
    pub fn validation(what: impl Into<String>, why: impl Into<String>) -> Self {
        UvError::Validation { what: what.into(), why: why.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UvError::Io { path: path.into(), source }
    }

    pub fn is_validation(&self) -> bool {
        matches!(self, UvError::Validation { .. })
    }
}

pub type Result<T> = std::result::Result<T, UvError>;
