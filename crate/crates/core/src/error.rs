use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("grammar validation failed [{rule}]: {detail}")]
    GrammarValidation { rule: &'static str, detail: String },

    #[error("sequence of length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },

    #[error("{what} index {index} out of range (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite loss at step {step}: {dump}")]
    NonFinite { step: u64, dump: String },

    #[error("checkpoint checksum mismatch (file truncated or corrupt)")]
    Checksum,

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap a serde_json error with its line/column position.
    pub(crate) fn parse_json(err: &serde_json::Error, line_offset: usize) -> Self {
        Error::Parse {
            line: err.line() + line_offset,
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::GrammarValidation { .. }
                | Error::Length { .. }
                | Error::Index { .. }
                | Error::Domain(_)
                | Error::Json(_)
        )
    }
}
