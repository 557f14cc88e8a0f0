use std::fmt::Display;
use std::path::Path;

/// Failures of the file formats and commands.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] mvfs_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Read {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn write(path: &Path, source: std::io::Error) -> Self {
        Error::Write {
            path: path.display().to_string(),
            source,
        }
    }

    /// `line` 0 refers to the file as a whole.
    pub fn malformed(path: &Path, line: usize, message: impl Display) -> Self {
        let path = path.display().to_string();
        let message = message.to_string();
        if line == 0 {
            Error::Invalid { path, message }
        } else {
            Error::Malformed { path, line, message }
        }
    }

    /// 1 for usage and configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use mvfs_core::Error as Core;
        match self {
            Error::Write { .. } | Error::Runtime(_) => 2,
            Error::Core(Core::Divergence { .. } | Core::NonDeterministic { .. } | Core::MissingGradient(_)) => 2,
            _ => 1,
        }
    }
}
