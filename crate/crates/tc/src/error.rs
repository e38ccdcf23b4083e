use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum TcError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Invalid configuration; `at` is the JSON path of the offending value.
    #[error("invalid config {file} at `{at}`: {reason}")]
    Config { file: String, at: String, reason: String },

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("invalid invocation: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] tc_core::Error),

    #[error("{0}")]
    Other(String),
}

impl TcError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        TcError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        TcError::Format { path: path.to_path_buf(), reason: reason.into() }
    }

    /// Process exit code: 2 for bad input from the caller, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            TcError::Config { .. } | TcError::Leakage(_) | TcError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = TcError> = std::result::Result<T, E>;
