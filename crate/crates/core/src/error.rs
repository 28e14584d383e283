use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside its declared range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A request or delta referenced something that does not exist.
    #[error("unknown reference: {0}")]
    Reference(String),

    /// A request failed validation; each entry names a field and rule.
    #[error("request failed validation: {}", join_violations(.0))]
    Invalid(Vec<crate::request::Violation>),

    #[error("backend `{backend}` failed at step {step}: {message}")]
    Backend {
        backend: String,
        step: usize,
        message: String,
    },

    #[error("embedding of {what} failed: {message}")]
    Embedding { what: String, message: String },

    #[error("vote rejected: {0}")]
    VoteRejected(String),

    #[error("no exemplars: {0}")]
    EmptySet(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed artifact: {0}")]
    Format(String),
}

fn join_violations(v: &[crate::request::Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
