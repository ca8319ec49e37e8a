use std::io;

use thiserror::Error;

pub type Result<T, E = GbunError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GbunError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("round {round}: linear system unsolvable after jitter retries ({detail})")]
    Solver { round: u32, detail: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("network error: {0}")]
    Network(String),

    #[error("model file: {0}")]
    Model(String),

    #[error("unsupported model version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl GbunError {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        GbunError::Data(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        GbunError::Config(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        GbunError::Protocol(msg.into())
    }

    pub(crate) fn network(msg: impl Into<String>) -> Self {
        GbunError::Network(msg.into())
    }

    pub(crate) fn model(msg: impl Into<String>) -> Self {
        GbunError::Model(msg.into())
    }
}
