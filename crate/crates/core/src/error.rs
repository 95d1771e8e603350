use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("zero-norm vector passed to cosine similarity")]
    ZeroNorm,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("position {position} out of range (max_positions = {max})")]
    PositionOutOfRange { position: usize, max: usize },

    #[error("decider set is empty")]
    EmptyDeciders,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A callback or internal component violated its documented contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
