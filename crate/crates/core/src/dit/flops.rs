//! FLOP accounting for the toy model.
//!
//! A multiply-add counts as 2 FLOPs; element-wise work (norms, activations,
//! softmax, rotary) is not counted. For a forward over `n` tokens attending
//! to `m` keys, with patch dim `p`, width `d`, MLP width `h` and `L` layers:
//!
//! ```text
//! token_linear = 2n·p·d + L·(8n·d² + 4n·d·h) + 2n·d·p
//! attention    = L·4n·m·d
//! conditioning = 2·256·d + 2d² + L·12d² + 4d²
//! ```
//!
//! `token_linear` is the term that scales with the active-token count; the
//! attention term scales with active queries times cached keys.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::TIME_FEATURES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    pub token_linear: u64,
    pub attention: u64,
    pub conditioning: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.token_linear + self.attention + self.conditioning
    }

    pub(crate) fn gemm(m: usize, k: usize, n: usize) -> u64 {
        2 * (m as u64) * (k as u64) * (n as u64)
    }

    pub fn add(&mut self, other: &FlopCounter) {
        self.token_linear += other.token_linear;
        self.attention += other.attention;
        self.conditioning += other.conditioning;
    }
}

impl std::ops::AddAssign for FlopCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.add(&rhs);
    }
}

/// Closed-form FLOPs of one forward over `tokens` queries and `keys` keys.
pub fn analytic_forward_flops(config: &ModelConfig, tokens: usize, keys: usize) -> FlopCounter {
    let n = tokens as u64;
    let m = keys as u64;
    let p = config.patch_dim() as u64;
    let d = config.hidden_dim as u64;
    let h = config.mlp_dim() as u64;
    let l = config.layers as u64;
    let t = TIME_FEATURES as u64;
    FlopCounter {
        token_linear: 2 * n * p * d + l * (8 * n * d * d + 4 * n * d * h) + 2 * n * d * p,
        attention: l * 4 * n * m * d,
        conditioning: 2 * t * d + 2 * d * d + l * 12 * d * d + 4 * d * d,
    }
}
