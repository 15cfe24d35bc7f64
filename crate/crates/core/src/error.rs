use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("attention mask row {row} has no allowed column")]
    FullyMaskedRow { row: usize },

    #[error("sequence length {needed} exceeds max_seq {max_seq}")]
    MaxSeqOverflow { needed: usize, max_seq: usize },

    #[error("token id {token} out of vocabulary of size {vocab}")]
    InvalidToken { token: u32, vocab: usize },

    #[error("invalid token tree: {0}")]
    InvalidTree(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("kv cache: {0}")]
    Cache(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
