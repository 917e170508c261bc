use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label space: {0}")]
    LabelSpace(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("malformed file {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front-end: 1 for configuration
    /// problems, 2 for I/O and file-format problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::LabelSpace(_) | Error::Config(_) | Error::Parse(_) => 1,
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::Mask(_) | Error::Shape(_) | Error::Numeric(_) => 3,
        }
    }
}
