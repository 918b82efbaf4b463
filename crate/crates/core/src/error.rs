use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("token id {id} out of range (vocabulary size {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("special token id {0} cannot be rendered as text")]
    SpecialInText(u32),

    #[error("label {label} at position {position} outside vocabulary of size {vocab}")]
    LabelOutOfRange {
        label: i64,
        position: usize,
        vocab: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    LengthOverflow { len: usize, max_len: usize },

    #[error("role {0} has no weights yet")]
    RoleUninitialized(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at phase {phase}, epoch {epoch}, batch {batch}")]
    Divergence {
        phase: usize,
        epoch: usize,
        batch: usize,
    },

    #[error("{path}: malformed record at line {line}: {message}")]
    Data {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corrupt file at byte {position}: {message}")]
    Format { position: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("no record with id {0}")]
    UnknownRecord(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(position: u64, message: impl Into<String>) -> Self {
        Error::Format {
            position,
            message: message.into(),
        }
    }
}
