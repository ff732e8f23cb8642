use thiserror::Error;

/// Errors raised by kernels, the model and the sampler.
#[derive(Debug, Error)]
pub enum RasError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteLayer { layer: usize },

    #[error("non-finite sample at step {step}")]
    NonFiniteStep { step: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("kv cache not initialized; a full forward pass must run before recovery")]
    CacheInvalid,

    #[error("noise cache not initialized at selective step {step}")]
    NoiseCacheUninitialized { step: usize },

    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial {initial}")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
    },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("malformed permutation: {0}")]
    Permutation(String),

    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl RasError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        RasError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            RasError::Shape { .. } => "shape",
            RasError::IndexOutOfRange { .. } => "index_out_of_range",
            RasError::InvalidIndexSet(_) => "invalid_index_set",
            RasError::NonFinite(_) | RasError::NonFiniteLayer { .. } => "non_finite",
            RasError::NonFiniteStep { .. } => "non_finite_step",
            RasError::InvalidConfig(_) => "invalid_config",
            RasError::CacheInvalid => "cache_invalid",
            RasError::NoiseCacheUninitialized { .. } => "noise_cache_uninitialized",
            RasError::Diverged { .. } => "diverged",
            RasError::InvalidTrace(_) => "invalid_trace",
            RasError::Permutation(_) => "permutation",
            RasError::Checkpoint(e) => e.kind(),
            RasError::Io(_) => "io",
            RasError::Serde(_) => "serde",
        }
    }
}

pub type Result<T> = std::result::Result<T, RasError>;
