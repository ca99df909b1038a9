use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failure classes map onto the CLI exit codes: validation failures are
/// detected before any work starts, runtime failures after.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] scribblevc_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("manifest {path}: {}{message}", record.as_ref().map(|r| format!("record {r}: ")).unwrap_or_default())]
    Manifest {
        path: PathBuf,
        record: Option<String>,
        message: String,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, message: impl ToString) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn checkpoint(path: &Path, message: impl ToString) -> Self {
        Error::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    /// Whether the failure is a bad input (config, manifest, checkpoint)
    /// rather than a fault during the run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Core(e) => matches!(
                e,
                scribblevc_core::Error::InvalidConfig(_)
                    | scribblevc_core::Error::InvalidArgument(_)
                    | scribblevc_core::Error::CannotFit(_)
            ),
            Error::Io { .. } => false,
            Error::Parse { .. } | Error::Manifest { .. } | Error::Checkpoint { .. } | Error::Config(_) => true,
        }
    }
}
