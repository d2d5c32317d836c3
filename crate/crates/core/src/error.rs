use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] vbpt_autodiff::Error),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds the configured maximum {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("batch has no loss-bearing positions")]
    NoLossPositions,
    #[error("example of {len} tokens does not fit a sequence of {seq_len}")]
    TemplateOverflow { len: usize, seq_len: usize },
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown evaluator `{0}`")]
    UnknownEvaluator(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what} at step {step}")]
    Divergence { what: String, step: u64 },
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
