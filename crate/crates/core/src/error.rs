use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error in {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("data error: {0}")]
    InvalidData(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("numeric error in {context}: {msg}")]
    Numeric { context: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(context: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data { .. } | Error::InvalidData(_) | Error::Degenerate(_) | Error::Io { .. } => 3,
            Error::Numeric { .. } => 4,
            Error::Shape(_) | Error::Ordering(_) => 1,
        }
    }
}
