use std::path::PathBuf;

use filippov_core::PwsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(#[from] PwsError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("scan: {0}")]
    Scan(String),
}

impl HarnessError {
    /// Process exit code: 1 for anything the user can fix in the config or
    /// the filesystem, 2 for failures of the numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } => 1,
            HarnessError::Numerical(_) | HarnessError::Scan(_) => 2,
        }
    }

    /// The message without the category prefix.
    pub fn message(&self) -> String {
        match self {
            HarnessError::Config(m) | HarnessError::Scan(m) => m.clone(),
            other => other.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }
}
