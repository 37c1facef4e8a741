use std::io;
use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Re-tags a format error raised while decoding an in-memory stream with
    /// the file it came from.
    pub(crate) fn at_path(self, path: impl AsRef<Path>) -> Self {
        match self {
            Error::Format { msg, .. } => Error::format(path, msg),
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        }
    }
}
