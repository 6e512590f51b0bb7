use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("impossible task: {0}")]
    ImpossibleTask(String),
    #[error("invalid training spec: {0}")]
    InvalidTrainSpec(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("model has no attention layers to probe")]
    NoAttentionLayers,
    #[error(transparent)]
    Core(#[from] jamba_core::error::Error),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<jamba_core::numerics::NumericsError> for HarnessError {
    fn from(e: jamba_core::numerics::NumericsError) -> Self {
        HarnessError::Core(e.into())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
