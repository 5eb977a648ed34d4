use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KsaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty attention row (query {0})")]
    EmptyAttentionRow(usize),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("chunk overflow: current chunk already holds {0} tokens")]
    ChunkOverflow(usize),

    #[error("premature finalize: current chunk holds {fill} of {chunk_size} tokens")]
    PrematureFinalize { fill: usize, chunk_size: usize },

    #[error("summary buffer full (capacity {0})")]
    SummaryBufferFull(usize),

    #[error("chunk boundary reached: pending summary token must be supplied")]
    MissingSummary,

    #[error("summary token supplied but no chunk is pending finalization")]
    UnexpectedSummary,

    #[error("input error: {0}")]
    Input(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("gradient check failed for: {0}")]
    GradCheck(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, KsaError>;

impl From<std::io::Error> for KsaError {
    fn from(e: std::io::Error) -> Self {
        KsaError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for KsaError {
    fn from(e: serde_json::Error) -> Self {
        KsaError::Io(e.to_string())
    }
}
