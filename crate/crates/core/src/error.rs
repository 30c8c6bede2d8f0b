//! Shared error type for the simulation engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The reference set spans no variance, so no principal directions exist.
    #[error("rank-deficient reference set")]
    RankDeficientReference,

    #[error("undefined cosine distance: zero vector")]
    UndefinedCosine,

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("not an IDX file: {0}")]
    NotIdx(String),

    #[error("IDX item count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("bank cannot be populated: {0}")]
    BankUnpopulated(String),

    #[error("divergence: non-finite loss at round {round}, client {client}")]
    Divergence { round: u64, client: u64 },

    #[error("architecture mismatch between models")]
    ArchMismatch,

    #[error("missing sample size for participant {0}")]
    MissingSize(u64),

    #[error("empty client pool at round {0}")]
    EmptyPool(u64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
