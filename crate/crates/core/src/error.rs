use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    OutOfBounds { x: u32, y: u32, width: u32, height: u32 },

    #[error("pixel ({x}, {y}) is background")]
    BackgroundPixel { x: u32, y: u32 },

    #[error("malformed tree: {0}")]
    MalformedTree(String),

    #[error("corrupt {format} data: {reason}")]
    Corrupt { format: &'static str, reason: String },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("forest has {forest} joints but data has {data}")]
    JointCountMismatch { forest: usize, data: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    File { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn corrupt(format: &'static str, reason: impl Into<String>) -> Error {
        Error::Corrupt { format, reason: reason.into() }
    }

    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Error {
        Error::Invalid { what, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
        Error::File { path: path.into(), reason: reason.into() }
    }

    /// Attach a file path to errors produced while parsing that file's bytes.
    pub(crate) fn at_path(self, path: impl Into<PathBuf>) -> Error {
        match self {
            Error::Corrupt { format, reason } => {
                Error::file(path, format!("corrupt {format} data: {reason}"))
            }
            Error::Invalid { what, reason } => {
                Error::file(path, format!("invalid {what}: {reason}"))
            }
            other => other,
        }
    }
}
