//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix or vector shapes, naming both.
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A scalar argument is outside its admissible range.
    #[error("invalid parameter {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A line of an input file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A record violated a dataset invariant.
    #[error("invalid record {id}: {reason}")]
    Validation { id: String, reason: String },

    /// A required split or collection is empty.
    #[error("empty input: {what}")]
    Empty { what: String },

    /// Query asked for more neighbours than the index can supply.
    #[error("k exceeds index size after exclusion: k={k}, available={available}")]
    KExceedsIndex { k: usize, available: usize },

    /// Two entries share an id.
    #[error("id collision: {id}")]
    IdCollision { id: String },

    /// A binary artifact is corrupt or has the wrong version.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// An artifact required by this stage is missing or stale.
    #[error("missing artifact: {what}; run `{required_command}` first")]
    MissingArtifact {
        what: String,
        required_command: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_parameter(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    pub fn validation(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            id: id.into(),
            reason: reason.into(),
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
