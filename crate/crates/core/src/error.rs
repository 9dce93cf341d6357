use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, run or optimizer configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Command-line usage problems.
    #[error("usage error: {0}")]
    Usage(String),

    /// Inconsistent or unresolvable data (shapes, ids, labels).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed on-disk file.
    #[error("format error in {path}: {message} (byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Training-time failure other than numeric blowup.
    #[error("training error: {0}")]
    Training(String),

    /// Non-finite loss, gradients or failed numeric checks.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// Process exit code: 1 usage/config, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Unsupported(_) => 1,
            Error::Json { .. } => 1,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } => 2,
            Error::Training(_) | Error::Numeric(_) => 3,
        }
    }
}
