//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("key {0} is not resident in the cache")]
    KeyNotCached(u64),

    #[error("clock check for key {0} that was never fetched")]
    UnknownKey(u64),

    #[error("write to key {0} without a preceding read")]
    WriteWithoutRead(u64),

    #[error("cache capacity {capacity} cannot hold the {required} keys pinned by the current batch")]
    CapacityTooSmall { capacity: usize, required: usize },

    #[error("malformed frame: {0}")]
    Frame(String),

    #[error("unknown message type 0x{0:02x}")]
    UnknownMessageType(u8),

    #[error("expected {expected} response, got {got}")]
    UnexpectedResponse {
        expected: &'static str,
        got: &'static str,
    },

    #[error("transport: {0}")]
    Transport(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset parse error at line {line}: {reason}")]
    DatasetParse { line: usize, reason: String },

    #[error("AUC undefined: need at least one positive and one negative label")]
    DegenerateLabels,

    #[error("run aborted: {0}")]
    RunAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
