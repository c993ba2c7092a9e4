use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {detail}")]
    Corruption { file: PathBuf, detail: String },
    #[error(transparent)]
    Core(#[from] kvmargin_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corruption(file: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Corruption {
            file: file.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn schema(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Core(kvmargin_core::Error::Schema {
            field: field.into(),
            detail: detail.into(),
        })
    }

    /// Stable error designation, e.g. `CorruptionError`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Corruption { .. } => "CorruptionError",
            Error::Core(e) => e.kind(),
        }
    }
}
