use thiserror::Error;

/// Errors produced anywhere in the codec, training or tensor layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("gradient tape already consumed")]
    TapeConsumed,

    #[error("symbol {symbol} outside alphabet [{min}, {max}]")]
    Alphabet { symbol: i64, min: i64, max: i64 },

    #[error("corrupted arithmetic-coded stream: {0}")]
    CorruptStream(&'static str),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("model hash mismatch: stream expects {expected:016x}, model is {actual:016x}")]
    ModelHash { expected: u64, actual: u64 },

    #[error("parameter {0:?} not found in weight file")]
    MissingParam(String),

    #[error("training diverged at step {step} in stage {stage}: {detail}")]
    Diverged {
        stage: String,
        step: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
