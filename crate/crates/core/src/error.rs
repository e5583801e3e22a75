//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Operand shapes do not conform for an operation.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A configuration is structurally invalid (bad layer plan, nonpositive
    /// output dims, window larger than input, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An input violates an operation's mathematical domain (log of a
    /// nonpositive value, division by zero).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A forward operation produced a NaN or infinity. Overflow is an error,
    /// never a silent value.
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// An API contract was violated by the caller (non-scalar loss, label
    /// out of range, negative epsilon, mismatched report rows, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training aborted (non-finite loss, empty dataset).
    #[error("training aborted: {0}")]
    Training(String),

    /// Dataset or checkpoint bytes failed to parse.
    #[error("parse error at byte offset {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    /// Checkpoint integrity failure; names the offending parameter and its
    /// byte range inside the blob.
    #[error("checkpoint corrupt: parameter `{name}` (bytes {start}..{end}): {detail}")]
    Checkpoint {
        name: String,
        start: u64,
        end: u64,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
}
