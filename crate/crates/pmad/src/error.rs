use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pmad_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: row {row}: {message}", path.display())]
    Row { path: PathBuf, row: usize, message: String },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// Process exit status: 1 for bad input or configuration, 2 for
    /// failures while running.
    pub fn exit_code(&self) -> i32 {
        use pmad_core::Error as C;
        match self {
            Error::Core(C::Divergence { .. } | C::NonFiniteProbe { .. }) => 2,
            Error::Core(_) | Error::Row { .. } | Error::Format { .. } | Error::Usage(_) => 1,
            Error::Io { .. } => 2,
        }
    }
}
