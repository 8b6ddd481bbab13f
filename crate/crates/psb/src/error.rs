use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum PsbError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("softmax slice is fully masked (axis {axis})")]
    FullyMasked { axis: usize },

    #[error("starved slot: renormalization mass {mass:e} is below 1e-30")]
    StarvedSlot { mass: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("metric precondition: {0}")]
    MetricPrecondition(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainAborted { step: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PsbError>;
