//! Error type shared across the library.

use thiserror::Error;

/// Errors surfaced by graph construction, model evaluation, corpus I/O,
/// detection, and distillation.
#[derive(Debug, Error)]
pub enum LeafError {
    /// An operation received operands whose shapes violate its shape rule.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced or was handed a NaN or infinite value.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A value or configuration field is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A corpus file line failed to parse; `line` is 1-based.
    #[error("corpus parse error at line {line}: {msg}")]
    CorpusParse { line: usize, msg: String },

    /// A checkpoint file is malformed or belongs to a different format version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LeafError>;
