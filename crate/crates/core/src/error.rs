use thiserror::Error;

/// Errors raised by the retrieval, model, training, fusion and metric layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("document `{0}` is not part of the corpus")]
    UnknownDocument(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("trace does not belong to this model: {0}")]
    TraceMismatch(String),

    #[error("non-finite value during {stage}: {detail}")]
    NonFinite { stage: &'static str, detail: String },

    #[error("missing feature `{0}` required by the decision strategy")]
    MissingFeature(&'static str),

    #[error("undefined metric: {0}")]
    Undefined(&'static str),

    #[error("noise pool too small: need {need}, have {have}")]
    PoolTooSmall { need: usize, have: usize },

    #[error("preference pair rejected: {0}")]
    PairRejected(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
