//! Flow-matching training of the toy DiT on procedural shapes.
//!
//! Each example draws `x₁ ~ N(0, I)` and `σ ~ U(0, 1)`, forms
//! `x_σ = (1−σ)x₀ + σx₁` and regresses the model output onto `x₁ − x₀`.
//! Gradients come from the hand-written backward pass; parameters are
//! updated with AdamW and tracked by an exponential moving average.

mod dataset;

pub use dataset::{classify_by_template, ShapeKind, ShapeParams, ShapesDataset};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dit::DitModel;
use crate::error::{RasError, Result};
use crate::image::Image;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 500,
            ema_decay: 0.999,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.eps];
        if self.batch_size == 0 || positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(RasError::InvalidConfig(
                "batch_size, lr and eps must be positive".into(),
            ));
        }
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("ema_decay", self.ema_decay),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(RasError::InvalidConfig(format!(
                    "{name} {b} outside [0, 1)"
                )));
            }
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(RasError::InvalidConfig(
                "weight_decay and grad_clip must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One training example with its sampled noise and noise level.
#[derive(Clone, Debug)]
pub struct FlowExample {
    pub x0: Image,
    pub x1: Image,
    pub sigma: f32,
    pub class_id: Option<usize>,
}

impl FlowExample {
    /// `x_σ = (1−σ)x₀ + σx₁`.
    pub fn noised(&self) -> Image {
        let s = self.sigma;
        let mut out = self.x0.clone();
        for (o, n) in out.data_mut().iter_mut().zip(self.x1.data()) {
            *o = (1.0 - s) * *o + s * n;
        }
        out
    }

    /// `v* = x₁ − x₀`.
    pub fn target(&self) -> Image {
        let mut out = self.x1.clone();
        for (o, d) in out.data_mut().iter_mut().zip(self.x0.data()) {
            *o -= d;
        }
        out
    }
}

fn image_to_patches(model: &DitModel, img: &Image) -> Result<Matrix> {
    let grid = model.config.grid();
    grid.check_image(img)?;
    let mut m = Matrix::zeros(grid.num_patches(), grid.patch_dim());
    for p in 0..grid.num_patches() {
        grid.read_patch(img, p, m.row_mut(p));
    }
    Ok(m)
}

/// Mean squared error of one example. When `grads` is given, adds
/// `scale · ∂loss/∂θ` into it.
pub fn example_loss(
    model: &DitModel,
    ex: &FlowExample,
    grads: Option<(&mut DitModel, f32)>,
) -> Result<f64> {
    let input = image_to_patches(model, &ex.noised())?;
    let target = image_to_patches(model, &ex.target())?;
    let (out, rec) = model.forward_patches(&input, ex.sigma, ex.class_id, None, grads.is_some())?;
    let n = out.data().len() as f64;
    let mut loss = 0.0f64;
    let mut dout = Matrix::zeros(out.rows(), out.cols());
    let coef = 2.0 / n as f32;
    for ((g, o), t) in dout
        .data_mut()
        .iter_mut()
        .zip(out.data())
        .zip(target.data())
    {
        let r = o - t;
        loss += (r as f64) * (r as f64);
        *g = coef * r;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(RasError::NonFinite(format!(
            "training loss at sigma {}",
            ex.sigma
        )));
    }
    if let Some((g, scale)) = grads {
        if scale != 1.0 {
            dout.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        model.backward(rec.as_ref().expect("kept"), &dout, g)?;
    }
    Ok(loss)
}

/// Mean loss over a batch and its gradient. Per-example gradients are
/// accumulated in batch order.
pub fn flow_matching_loss(model: &DitModel, batch: &[FlowExample]) -> Result<(f64, DitModel)> {
    if batch.is_empty() {
        return Err(RasError::InvalidConfig("empty batch".into()));
    }
    let mut grads = model.zeros_like();
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    for ex in batch {
        total += example_loss(model, ex, Some((&mut grads, scale)))?;
    }
    Ok((total / batch.len() as f64, grads))
}

/// Examples of one optimizer step. Data order is sequential over the
/// dataset; noise and σ come from a generator keyed by `(seed, step)`.
pub fn make_batch(
    dataset: &ShapesDataset,
    config: &TrainConfig,
    step: usize,
    channels: usize,
) -> Vec<FlowExample> {
    let b = config.batch_size;
    (0..b)
        .into_par_iter()
        .map(|i| {
            let index = (step * b + i) as u64;
            let (x0, class) = dataset.sample(index);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_F10E);
            rng.set_stream(index);
            let sigma: f32 = rng.gen_range(0.0..1.0);
            let data = (0..channels * dataset.size * dataset.size)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                .collect();
            let x1 = Image::from_vec(channels, dataset.size, dataset.size, data).expect("sized");
            FlowExample {
                x0,
                x1,
                sigma,
                class_id: Some(class),
            }
        })
        .collect()
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: DitModel,
    v: DitModel,
    t: u64,
}

impl AdamW {
    pub fn new(model: &DitModel) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut DitModel, grads: &DitModel, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let decay = (1.0 - lr * cfg.weight_decay) as f32;
        let eps = cfg.eps as f32;
        let params = model.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        let gs = grads.tensors();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(gs) {
            let it =
                p.1.data_mut()
                    .iter_mut()
                    .zip(m.1.data_mut())
                    .zip(v.1.data_mut())
                    .zip(g.1.data());
            for (((w, m), v), g) in it {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w = *w * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

fn global_norm(grads: &DitModel) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

fn scale_all(grads: &mut DitModel, s: f32) {
    for (_, t) in grads.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

/// `ema ← d·ema + (1−d)·θ` with `d = min(decay, (1+t)/(10+t))`.
pub fn ema_update(ema: &mut DitModel, model: &DitModel, decay: f64, step: usize) {
    let d = decay.min((1.0 + step as f64) / (10.0 + step as f64)) as f32;
    for ((_, e), (_, p)) in ema.tensors_mut().into_iter().zip(model.tensors()) {
        for (e, p) in e.data_mut().iter_mut().zip(p.data()) {
            *e = d * *e + (1.0 - d) * p;
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DitModel,
    pub ema: DitModel,
    /// Batch loss before each optimizer step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_moving_average(&self, window: usize) -> Option<f64> {
        moving_average(&self.losses, window).last().copied()
    }
}

/// Trailing moving average; entry `i` averages `losses[i+1−w ..= i]`.
pub fn moving_average(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for i in 0..losses.len() {
        acc += losses[i];
        if i >= w {
            acc -= losses[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Trains `model` in place for `config.steps` steps. `on_step` sees the
/// step index and batch loss.
pub fn train(
    model: DitModel,
    dataset: &ShapesDataset,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.size != model.config.image_h || dataset.size != model.config.image_w {
        return Err(RasError::InvalidConfig(format!(
            "dataset images are {0}x{0}, model expects {1}x{2}",
            dataset.size, model.config.image_h, model.config.image_w
        )));
    }
    let mut model = model;
    let mut ema = model.clone();
    let mut opt = AdamW::new(&model);
    let mut losses = Vec::with_capacity(config.steps);
    let mut initial = None;
    for step in 0..config.steps {
        let batch = make_batch(dataset, config, step, model.config.channels);
        let (loss, mut grads) = flow_matching_loss(&model, &batch)?;
        let first = *initial.get_or_insert(loss);
        if loss > 10.0 * first {
            return Err(RasError::Diverged {
                step,
                loss,
                initial: first,
            });
        }
        if config.grad_clip > 0.0 {
            let norm = global_norm(&grads);
            if norm > config.grad_clip {
                scale_all(&mut grads, (config.grad_clip / norm) as f32);
            }
        }
        let warm = if config.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / config.warmup_steps as f64).min(1.0)
        };
        opt.step(&mut model, &grads, config.lr * warm, config);
        ema_update(&mut ema, &model, config.ema_decay, step);
        losses.push(loss);
        on_step(step, loss);
    }
    if !model.is_finite() {
        return Err(RasError::NonFinite("trained weights".into()));
    }
    Ok(TrainOutcome { model, ema, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ModelConfig;

    fn scalar(v: f32) -> Image {
        Image::from_vec(1, 1, 1, vec![v]).unwrap()
    }

    #[test]
    fn interpolation_arithmetic() {
        let ex = FlowExample {
            x0: scalar(0.0),
            x1: scalar(1.0),
            sigma: 0.5,
            class_id: None,
        };
        assert_eq!(ex.noised().data(), &[0.5]);
        assert_eq!(ex.target().data(), &[1.0]);
    }

    #[test]
    fn zero_model_has_zero_loss_on_coincident_endpoints() {
        let cfg = ModelConfig::tiny();
        let model = DitModel::zeros(&cfg).unwrap();
        let x = Image::standard_normal(1, 8, 8, 3);
        let ex = FlowExample {
            x0: x.clone(),
            x1: x,
            sigma: 0.3,
            class_id: Some(1),
        };
        assert_eq!(example_loss(&model, &ex, None).unwrap(), 0.0);
    }

    #[test]
    fn zero_steps_returns_model_unchanged() {
        let cfg = ModelConfig::tiny();
        let model = DitModel::init(&cfg, 1).unwrap();
        let tc = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(model.clone(), &ShapesDataset::new(8, 0), &tc, |_, _| {}).unwrap();
        assert_eq!(out.model, model);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn moving_average_window() {
        let ma = moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(ma, vec![1.0, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = ModelConfig::tiny();
        let tc = TrainConfig {
            steps: 60,
            batch_size: 8,
            warmup_steps: 10,
            seed: 4,
            ..TrainConfig::default()
        };
        let ds = ShapesDataset::new(8, 2);
        let a = train(DitModel::init(&cfg, 7).unwrap(), &ds, &tc, |_, _| {}).unwrap();
        let b = train(DitModel::init(&cfg, 7).unwrap(), &ds, &tc, |_, _| {}).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.losses, b.losses);
        let early: f64 = a.losses[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = a.losses[50..].iter().sum::<f64>() / 10.0;
        assert!(late < early, "{early} -> {late}");
    }
}
