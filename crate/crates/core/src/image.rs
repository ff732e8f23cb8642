//! Channel-first image tensors and the patch grid laid over them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{RasError, Result};

/// A `channels × height × width` f32 tensor stored channel-first.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(RasError::shape(
                "Image::from_vec",
                format!(
                    "{} values for a {channels}x{height}x{width} image",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Standard normal image drawn in channel-major, row-major order from a
    /// ChaCha8 stream seeded with `seed`.
    pub fn standard_normal(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * height * width)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mse(&self, other: &Image) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum::<f64>()
            / n
    }
}

/// Square patch tiling of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(channels: usize, height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0
            || !height.is_multiple_of(patch_size)
            || !width.is_multiple_of(patch_size)
        {
            return Err(RasError::InvalidConfig(format!(
                "{height}x{width} image is not divisible by patch size {patch_size}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            patch_size,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Values per flattened patch: `patch_size² × channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Grid (row, col) of a patch index in row-major order.
    pub fn position(&self, patch: usize) -> (usize, usize) {
        (patch / self.grid_w(), patch % self.grid_w())
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        if image.shape() != (self.channels, self.height, self.width) {
            return Err(RasError::shape(
                "patch grid",
                format!(
                    "image {:?} does not match grid {:?}",
                    image.shape(),
                    (self.channels, self.height, self.width)
                ),
            ));
        }
        Ok(())
    }

    /// Flattens one patch pixel-major, channel-minor: offset
    /// `(py · patch_size + px) · channels + c`.
    pub fn read_patch(&self, image: &Image, patch: usize, out: &mut [f32]) {
        let (gr, gc) = self.position(patch);
        let p = self.patch_size;
        for py in 0..p {
            for px in 0..p {
                for c in 0..self.channels {
                    out[(py * p + px) * self.channels + c] = image.get(c, gr * p + py, gc * p + px);
                }
            }
        }
    }

    pub fn write_patch(&self, image: &mut Image, patch: usize, values: &[f32]) {
        let (gr, gc) = self.position(patch);
        let p = self.patch_size;
        for py in 0..p {
            for px in 0..p {
                for c in 0..self.channels {
                    image.set(
                        c,
                        gr * p + py,
                        gc * p + px,
                        values[(py * p + px) * self.channels + c],
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_roundtrip() {
        let grid = PatchGrid::new(2, 4, 6, 2).unwrap();
        let data: Vec<f32> = (0..48).map(|v| v as f32).collect();
        let img = Image::from_vec(2, 4, 6, data).unwrap();
        let mut out = Image::zeros(2, 4, 6);
        let mut buf = vec![0.0; grid.patch_dim()];
        for p in 0..grid.num_patches() {
            grid.read_patch(&img, p, &mut buf);
            grid.write_patch(&mut out, p, &buf);
        }
        assert_eq!(img, out);
        assert_eq!(grid.position(4), (1, 1));
    }

    #[test]
    fn noise_is_seeded() {
        let a = Image::standard_normal(1, 4, 4, 9);
        let b = Image::standard_normal(1, 4, 4, 9);
        assert_eq!(a, b);
        assert_ne!(a, Image::standard_normal(1, 4, 4, 10));
    }

    #[test]
    fn rejects_indivisible_grid() {
        assert!(PatchGrid::new(1, 10, 8, 4).is_err());
    }
}
