use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },
    #[error("scenario generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },
    #[error("training diverged at {at}: {reason}")]
    Training { at: String, reason: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("missing dependency: {what} not found at {path}; run `{step}` first")]
    MissingDependency {
        what: String,
        path: PathBuf,
        step: &'static str,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for each error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingDependency { .. } => 3,
            Error::Io { .. } => 4,
            Error::Data(_) | Error::Lookup(_) | Error::Shape { .. } => 5,
            Error::Training { .. } | Error::Generation { .. } => 6,
            Error::Argument(_) | Error::Report(_) => 7,
        }
    }
}
