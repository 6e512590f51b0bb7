use thiserror::Error;

use crate::config::ConfigError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("incremental decoding requires batch 1, got {0}")]
    CacheBatch(usize),
    #[error("cache does not match model: {0}")]
    CacheMismatch(String),
    #[error("numeric overflow in layer {layer}: {source}")]
    NumericOverflow {
        layer: usize,
        #[source]
        source: NumericsError,
    },
    #[error("token id {token} is outside the vocabulary of {vocab}")]
    VocabOverflow { token: usize, vocab: usize },
    #[error("memory budget of {budget} bytes cannot hold {required} bytes of weights and fixed state")]
    BudgetTooSmall { budget: u64, required: u64 },
    #[error("checkpoint format violation: {0}")]
    Format(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
