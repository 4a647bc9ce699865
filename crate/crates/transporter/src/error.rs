use std::path::{Path, PathBuf};

use transporter_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Ply {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Format(String),
    #[error("checkpoint integrity: {0}")]
    Checksum(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 success, 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Numeric(_) | Error::Core(CoreError::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}
