use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in record {record}, field `{field}`: {message}")]
    Record {
        record: usize,
        field: String,
        message: String,
    },

    #[error("parse error at line {line}: {message}")]
    Line { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },

    #[error("cannot resolve {}: {reason}", path.display())]
    Resolution { path: PathBuf, reason: String },

    #[error("non-finite loss on example `{example}`: {detail}")]
    NonFinite { example: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
