//! Toy diffusion transformer: patchify, 2D-rotary attention blocks with
//! adaLN-zero conditioning, selective-token inference with per-layer
//! key/value caches, and hand-written backpropagation for training.

mod backward;
mod cache;
mod config;
mod flops;
mod forward;
mod model;
pub mod rope;

pub use cache::{KvCache, LayerKv};
pub use config::ModelConfig;
pub use flops::{analytic_forward_flops, FlopCounter};
pub use forward::{
    attention, cached_attention, time_features, unpatchify, TokenSequence, SIGMA_SCALE,
};
pub use model::{BlockWeights, DitModel, TIME_FEATURES};
