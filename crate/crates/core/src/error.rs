use std::path::PathBuf;

use thiserror::Error;

use crate::training::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The I/O cause is part of the message rather than a chained source, so
    /// error reports do not print it twice.
    #[error("{}: {cause}", path.display())]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("invalid manifest entry `{id}`: {message}")]
    InvalidEntry { id: String, message: String },

    #[error("sample `{0}` already has a split assigned")]
    AlreadyAssigned(String),

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("model `{0}` is already registered")]
    DuplicateModel(String),

    #[error("model `{0}` is not bundled; provide an external plug-in")]
    NotBundled(String),

    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged {
        epoch: usize,
        loss: f64,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error("AUC is undefined: {0}")]
    UndefinedAuc(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
