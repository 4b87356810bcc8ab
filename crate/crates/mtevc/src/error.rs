use std::path::{Path, PathBuf};

use mtevc_core::Error as CoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("incompatible checkpoint {}: {message}", path.display())]
    Compatibility { path: PathBuf, message: String },
    /// A numerical self-check (gradient check) failed.
    #[error("numerical check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Process exit codes of the command line.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const DIVERGED: i32 = 3;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => exit::USAGE,
            Error::Check(_) | Error::Core(CoreError::TrainingDiverged(_) | CoreError::NonFinite(_)) => exit::DIVERGED,
            _ => exit::DATA,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Error {
        Error::Format { path: path.to_path_buf(), message: message.into() }
    }
}
