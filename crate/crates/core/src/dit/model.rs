use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{RasError, Result};
use crate::tensor::Matrix;

/// Width of the sinusoidal noise-level features fed to the timestep MLP.
pub const TIME_FEATURES: usize = 256;

/// Weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    /// `d × 6d`: shift, scale, gate for attention then MLP.
    pub ada_w: Matrix,
    pub ada_b: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub mlp_w1: Matrix,
    pub mlp_b1: Matrix,
    pub mlp_w2: Matrix,
    pub mlp_b2: Matrix,
}

/// The toy diffusion transformer. Linear layers are stored as `in × out`
/// matrices; biases as `1 × out` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DitModel {
    pub config: ModelConfig,
    pub patch_w: Matrix,
    pub patch_b: Matrix,
    pub time_w1: Matrix,
    pub time_b1: Matrix,
    pub time_w2: Matrix,
    pub time_b2: Matrix,
    /// `num_classes × d`; zero rows when unconditional.
    pub class_emb: Matrix,
    pub blocks: Vec<BlockWeights>,
    /// `d × 2d`: shift and scale of the output norm.
    pub final_ada_w: Matrix,
    pub final_ada_b: Matrix,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f32).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn normal(rows: usize, cols: usize, std: f32, rng: &mut ChaCha8Rng) -> Matrix {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl DitModel {
    /// All-zero weights with the right shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let h = config.mlp_dim();
        let pd = config.patch_dim();
        let z = Matrix::zeros;
        let blocks = (0..config.layers)
            .map(|_| BlockWeights {
                ada_w: z(d, 6 * d),
                ada_b: z(1, 6 * d),
                wq: z(d, d),
                wk: z(d, d),
                wv: z(d, d),
                wo: z(d, d),
                bo: z(1, d),
                mlp_w1: z(d, h),
                mlp_b1: z(1, h),
                mlp_w2: z(h, d),
                mlp_b2: z(1, d),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_w: z(pd, d),
            patch_b: z(1, d),
            time_w1: z(TIME_FEATURES, d),
            time_b1: z(1, d),
            time_w2: z(d, d),
            time_b2: z(1, d),
            class_emb: z(config.num_classes, d),
            blocks,
            final_ada_w: z(d, 2 * d),
            final_ada_b: z(1, 2 * d),
            out_w: z(d, pd),
            out_b: z(1, pd),
        })
    }

    /// Training initialization: Xavier-uniform projections, N(0, 0.02)
    /// timestep MLP and class table, and zero-initialized modulation and
    /// output projection so every block starts as the identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let h = config.mlp_dim();
        m.patch_w = xavier(config.patch_dim(), d, &mut rng);
        m.time_w1 = normal(TIME_FEATURES, d, 0.02, &mut rng);
        m.time_w2 = normal(d, d, 0.02, &mut rng);
        if config.num_classes > 0 {
            m.class_emb = normal(config.num_classes, d, 0.02, &mut rng);
        }
        for b in &mut m.blocks {
            b.wq = xavier(d, d, &mut rng);
            b.wk = xavier(d, d, &mut rng);
            b.wv = xavier(d, d, &mut rng);
            b.wo = xavier(d, d, &mut rng);
            b.mlp_w1 = xavier(d, h, &mut rng);
            b.mlp_w2 = xavier(h, d, &mut rng);
        }
        Ok(m)
    }

    /// Every tensor drawn from N(0, std). Unlike [`DitModel::init`] no path is
    /// zeroed, so every parameter receives gradient.
    pub fn random(config: &ModelConfig, seed: u64, std: f32) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in m.tensors_mut() {
            let (r, c) = t.shape();
            *t = normal(r, c, std, &mut rng);
        }
        Ok(m)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Named tensors in a fixed order (the checkpoint order).
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("patch_embed.weight".into(), &self.patch_w),
            ("patch_embed.bias".into(), &self.patch_b),
            ("time_mlp.0.weight".into(), &self.time_w1),
            ("time_mlp.0.bias".into(), &self.time_b1),
            ("time_mlp.2.weight".into(), &self.time_w2),
            ("time_mlp.2.bias".into(), &self.time_b2),
            ("class_embed".into(), &self.class_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (p("ada.weight"), &b.ada_w),
                (p("ada.bias"), &b.ada_b),
                (p("attn.q"), &b.wq),
                (p("attn.k"), &b.wk),
                (p("attn.v"), &b.wv),
                (p("attn.out.weight"), &b.wo),
                (p("attn.out.bias"), &b.bo),
                (p("mlp.0.weight"), &b.mlp_w1),
                (p("mlp.0.bias"), &b.mlp_b1),
                (p("mlp.2.weight"), &b.mlp_w2),
                (p("mlp.2.bias"), &b.mlp_b2),
            ]);
        }
        out.extend([
            ("final.ada.weight".into(), &self.final_ada_w),
            ("final.ada.bias".into(), &self.final_ada_b),
            ("final.out.weight".into(), &self.out_w),
            ("final.out.bias".into(), &self.out_b),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_w),
            ("patch_embed.bias".into(), &mut self.patch_b),
            ("time_mlp.0.weight".into(), &mut self.time_w1),
            ("time_mlp.0.bias".into(), &mut self.time_b1),
            ("time_mlp.2.weight".into(), &mut self.time_w2),
            ("time_mlp.2.bias".into(), &mut self.time_b2),
            ("class_embed".into(), &mut self.class_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (p("ada.weight"), &mut b.ada_w),
                (p("ada.bias"), &mut b.ada_b),
                (p("attn.q"), &mut b.wq),
                (p("attn.k"), &mut b.wk),
                (p("attn.v"), &mut b.wv),
                (p("attn.out.weight"), &mut b.wo),
                (p("attn.out.bias"), &mut b.bo),
                (p("mlp.0.weight"), &mut b.mlp_w1),
                (p("mlp.0.bias"), &mut b.mlp_b1),
                (p("mlp.2.weight"), &mut b.mlp_w2),
                (p("mlp.2.bias"), &mut b.mlp_b2),
            ]);
        }
        out.extend([
            ("final.ada.weight".into(), &mut self.final_ada_w),
            ("final.ada.bias".into(), &mut self.final_ada_b),
            ("final.out.weight".into(), &mut self.out_w),
            ("final.out.bias".into(), &mut self.out_b),
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Builds a model from named tensors, checking every shape against the
    /// config.
    pub fn from_tensors(config: &ModelConfig, mut tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let expected = m.tensors().len();
        if tensors.len() != expected {
            return Err(RasError::shape(
                "DitModel::from_tensors",
                format!("{} tensors, expected {expected}", tensors.len()),
            ));
        }
        for (name, slot) in m.tensors_mut() {
            let pos = tensors
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| {
                    RasError::shape("DitModel::from_tensors", format!("missing {name}"))
                })?;
            let (_, t) = tensors.swap_remove(pos);
            if t.shape() != slot.shape() {
                return Err(RasError::shape(
                    "DitModel::from_tensors",
                    format!("{name}: {:?} vs expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_zeroes_modulation() {
        let c = ModelConfig::tiny();
        let a = DitModel::init(&c, 1).unwrap();
        assert_eq!(a, DitModel::init(&c, 1).unwrap());
        assert_ne!(a, DitModel::init(&c, 2).unwrap());
        assert!(a
            .blocks
            .iter()
            .all(|b| b.ada_w.data().iter().all(|v| *v == 0.0)));
        assert!(a.out_w.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tensor_names_are_unique() {
        let m = DitModel::zeros(&ModelConfig::tiny()).unwrap();
        let names: Vec<_> = m.tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let c = ModelConfig::tiny();
        let m = DitModel::random(&c, 4, 0.1).unwrap();
        let owned: Vec<_> = m
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(DitModel::from_tensors(&c, owned.clone()).unwrap(), m);
        let mut bad = owned;
        bad[0].1 = Matrix::zeros(1, 1);
        assert!(DitModel::from_tensors(&c, bad).is_err());
    }
}
