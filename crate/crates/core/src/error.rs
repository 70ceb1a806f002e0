use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("index {id} out of range for table with {len} rows")]
    Index { id: usize, len: usize },

    #[error("empty loss support: every position is masked out")]
    EmptyLossSupport,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    Length { len: usize, max: usize },

    #[error("bbox {bbox:?} is outside a {rows}x{cols} scene")]
    Bounds { bbox: [usize; 4], rows: usize, cols: usize },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at step {step} (batch example ids {batch:?})")]
    NonFinite { step: usize, batch: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
