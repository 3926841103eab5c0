use std::path::PathBuf;

use empt_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config field `{field}`: {detail}")]
    Config { field: String, detail: String },
    #[error("{file}:{line}: {detail}")]
    Data {
        file: String,
        line: usize,
        detail: String,
    },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("input does not fit: {0}")]
    Overflow(String),
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// Short machine-readable category, used by the CLI's JSON error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io { .. } => "io",
            Error::Config { .. } => "config",
            Error::Data { .. } => "data",
            Error::Vocab(_) => "vocab",
            Error::Overflow(_) => "overflow",
            Error::Invalid(_) => "invalid",
            Error::NonFinite { .. } => "non_finite",
            Error::Serde(_) => "serde",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
