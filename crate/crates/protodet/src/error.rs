use std::io;
use std::path::PathBuf;

use protodet_core::Error as CoreError;

/// Process exit status for a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Data { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> ExitKind {
        match self {
            Self::Usage(_) | Self::Config(_) => ExitKind::Usage,
            Self::Io { .. } | Self::Data { .. } => ExitKind::Data,
            Self::Core(e) => match e {
                CoreError::NonFinite { .. } | CoreError::NonFiniteLoss { .. } => ExitKind::Numerical,
                CoreError::Config(_) => ExitKind::Usage,
                _ => ExitKind::Data,
            },
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.kind() as u8
    }
}

pub type AppResult<T> = Result<T, AppError>;
