use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mixture has no kept component")]
    EmptyMixture,

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad data: {0}")]
    Data(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
