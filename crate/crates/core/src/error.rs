use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value outside its domain: bad tooth number, degenerate box, shape mismatch.
    #[error("domain error: {0}")]
    Domain(String),

    /// A corpus file that parsed but violates a record-level invariant.
    #[error("invalid record {record}: {reason}")]
    InvalidRecord { record: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn record(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidRecord {
            record: record.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
