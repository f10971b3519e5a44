use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum MirlError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tensors belong to different tapes (op {0})")]
    TapeMismatch(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("unknown parameter: {0}")]
    UnknownParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MirlError>;

impl MirlError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MirlError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
