use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("unsupported modality: {0} input channels (supported: 1, 2 or 4)")]
    UnsupportedModality(usize),

    #[error("task error: {0}")]
    Task(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("incompatible checkpoint, mismatched fields: {}", .0.join(", "))]
    Compatibility(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config key `{key}` ({location}): {msg}")]
    ConfigKey { key: String, location: String, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
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
}
