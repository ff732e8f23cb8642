//! Region-adaptive sampling for a toy diffusion transformer.
//!
//! Each sampling step runs the model only on the patches whose predicted
//! noise is changing fastest and reuses the cached prediction elsewhere.
//! Inactive tokens still take part in attention through per-layer
//! key/value caches, and periodic dense steps reset accumulated drift.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod dit;
pub mod error;
pub mod export;
pub mod image;
pub mod region;
pub mod sampler;
pub mod tensor;
pub mod trace;
pub mod training;

pub use dit::{DitModel, KvCache, ModelConfig};
pub use error::{RasError, Result};
pub use image::{Image, PatchGrid};
pub use region::{CurveKind, MetricKind, PatchMask, RatioSchedule};
pub use sampler::{sample_dense, sample_ras, RasConfig, SigmaSchedule};
pub use trace::RunTrace;
