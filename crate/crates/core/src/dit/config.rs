use serde::{Deserialize, Serialize};

use crate::error::{RasError, Result};
use crate::image::PatchGrid;

/// Shape of the toy diffusion transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 0 means unconditional.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 32,
            image_w: 32,
            channels: 1,
            patch_size: 2,
            hidden_dim: 128,
            layers: 6,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    /// 16×16 single-channel images, 8×8 patch grid, d=64, 4 layers. This is
    /// the scale of the bundled trained checkpoint.
    pub fn small() -> Self {
        Self {
            image_h: 16,
            image_w: 16,
            channels: 1,
            patch_size: 2,
            hidden_dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
        }
    }

    /// d=16, L=2 on 8×8 images; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch_size: 2,
            hidden_dim: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        PatchGrid::new(self.channels, self.image_h, self.image_w, self.patch_size)?;
        if self.channels == 0 || self.hidden_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(RasError::InvalidConfig(
                "channels, hidden_dim, heads and mlp_ratio must be positive".into(),
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(RasError::InvalidConfig(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(RasError::InvalidConfig(format!(
                "head dim {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        if !self.hidden_dim.is_multiple_of(4) {
            return Err(RasError::InvalidConfig(format!(
                "hidden_dim {} must be divisible by 4 for 2D position features",
                self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            channels: self.channels,
            height: self.image_h,
            width: self.image_w,
            patch_size: self.patch_size,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }

    pub fn num_patches(&self) -> usize {
        self.grid().num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.grid().patch_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::small().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().num_patches(), 256);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ModelConfig::tiny();
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.hidden_dim = 6;
        c.heads = 2;
        assert!(c.validate().is_err());
    }
}
