use std::path::{Path, PathBuf};

use facerel_core::Error as CoreError;

/// Failure of a CLI stage, classified by exit status.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => 1,
            RunError::Numerical(_) => 2,
            RunError::Io { .. } => 3,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        RunError::Validation(msg.into())
    }
}

impl From<CoreError> for RunError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Numerical(_) | CoreError::NonFiniteGradient(_) => RunError::Numerical(e.to_string()),
            _ => RunError::Validation(e.to_string()),
        }
    }
}

pub type RunResult<T> = Result<T, RunError>;
