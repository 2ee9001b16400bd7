use std::path::PathBuf;

/// Errors produced by the planner and the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("model {model} does not fit: weights need {weights_bytes} B but only {available_bytes} B are usable")]
    NonFitting {
        model: String,
        weights_bytes: u64,
        available_bytes: f64,
    },

    #[error("model {model} fits but cannot hold one request of {seq_len} tokens (exact batch {exact_batch:.4})")]
    ZeroCapacity {
        model: String,
        seq_len: u64,
        exact_batch: f64,
    },

    #[error("batch size must be at least 1")]
    InvalidBatch,

    #[error("invalid model spec {name}: {reason}")]
    InvalidModel { name: String, reason: String },

    #[error("invalid device or parallel spec: {0}")]
    InvalidDevice(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown scheduler {0:?}")]
    UnknownScheduler(String),

    #[error("simulation made no progress after {0} iterations")]
    Livelock(u64),

    #[error("block pool invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: row {row}: invalid {field}: {message}")]
    Validation {
        path: PathBuf,
        row: usize,
        field: &'static str,
        message: String,
    },

    #[error("sweep caps are not successive doublings at position {0}")]
    Order(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
