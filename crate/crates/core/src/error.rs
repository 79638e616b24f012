use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the texture pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths of arguments do not agree.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A file does not follow its documented format.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// The dataset cannot satisfy the request.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Triplet mining needs at least two identities.
    #[error("mining error: {0}")]
    Mining(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dataset(msg: impl Into<String>) -> Self {
        Error::Dataset(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
