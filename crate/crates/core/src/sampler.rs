//! Flow-matching Euler sampling, plain and region-adaptive.
//!
//! The model output is treated as the velocity `v = x₁ − x₀` of the straight
//! path `x_σ = (1−σ)x₀ + σx₁`, so one step is `S ← S + (σ_next − σ)·N̂`.
//! The region-adaptive sampler runs the model on a subset of patches per
//! step, merges the fresh prediction with the cached prediction of the
//! other patches, applies the Euler update, then scores the merged noise
//! to choose the next step's patches.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dit::{unpatchify, DitModel, FlopCounter, KvCache};
use crate::error::{RasError, Result};
use crate::image::{Image, PatchGrid};
use crate::region::{
    compute_cache_scores, select_active, update_drops, CurveKind, DropCounter, MetricKind,
    PatchMask, RatioSchedule, DEFAULT_SPREAD,
};
use crate::tensor::IndexSet;
use crate::trace::{RunTrace, StepRecord, TraceHeader};

/// Descending noise levels `σ₀ = 1 > … > σ_T = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
}

impl SigmaSchedule {
    /// `T` uniform steps, warped by `σ' = μσ / (1 + (μ−1)σ)`.
    pub fn new(steps: usize, shift: f64) -> Result<Self> {
        if steps == 0 {
            return Err(RasError::InvalidConfig(
                "sampling needs at least one step".into(),
            ));
        }
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(RasError::InvalidConfig(format!(
                "shift {shift} must be positive"
            )));
        }
        let sigmas = (0..=steps)
            .map(|i| {
                let s = 1.0 - i as f64 / steps as f64;
                shift * s / (1.0 + (shift - 1.0) * s)
            })
            .collect();
        Ok(Self { sigmas })
    }

    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 || sigmas[0] != 1.0 || *sigmas.last().unwrap() != 0.0 {
            return Err(RasError::InvalidConfig(
                "sigma schedule must run from 1 to 0".into(),
            ));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(RasError::InvalidConfig(
                "sigma schedule must be strictly decreasing".into(),
            ));
        }
        Ok(Self { sigmas })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }
}

/// User-facing region-adaptive sampling policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasConfig {
    pub warmup_steps: usize,
    pub dense_reset_steps: Vec<usize>,
    pub average_ratio: f64,
    pub curve: CurveKind,
    pub spread: f64,
    pub starvation_scale: f64,
    pub metric: MetricKind,
    pub attention_recovery: bool,
    pub reset_drops_on_dense: bool,
}

impl Default for RasConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 4,
            dense_reset_steps: vec![12, 20],
            average_ratio: 0.5,
            curve: CurveKind::Linear,
            spread: DEFAULT_SPREAD,
            starvation_scale: 0.3,
            metric: MetricKind::Std,
            attention_recovery: true,
            reset_drops_on_dense: false,
        }
    }
}

impl RasConfig {
    /// Every step dense.
    pub fn dense() -> Self {
        Self {
            warmup_steps: 1,
            dense_reset_steps: Vec::new(),
            average_ratio: 1.0,
            curve: CurveKind::Flat,
            ..Self::default()
        }
    }

    pub fn schedule(&self, total_steps: usize) -> Result<RatioSchedule> {
        RatioSchedule::build(
            total_steps,
            self.warmup_steps,
            &self.dense_reset_steps,
            self.average_ratio,
            self.curve,
            self.spread,
            self.starvation_scale,
            self.metric,
        )
    }
}

/// Restores the full noise field: fresh values on active patches, the
/// cached prediction elsewhere.
pub fn merge_noise(
    cached: Option<&Image>,
    fresh: &Image,
    mask: &PatchMask,
    grid: &PatchGrid,
    step: usize,
) -> Result<Image> {
    grid.check_image(fresh)?;
    if mask.num_patches() != grid.num_patches() {
        return Err(RasError::shape(
            "merge_noise",
            format!(
                "{} mask flags for {} patches",
                mask.num_patches(),
                grid.num_patches()
            ),
        ));
    }
    if mask.is_all() {
        return Ok(fresh.clone());
    }
    let cached = cached.ok_or(RasError::NoiseCacheUninitialized { step })?;
    grid.check_image(cached)?;
    let mut out = cached.clone();
    let mut buf = vec![0.0; grid.patch_dim()];
    for p in mask.active().indices() {
        grid.read_patch(fresh, *p, &mut buf);
        grid.write_patch(&mut out, *p, &buf);
    }
    Ok(out)
}

/// `S + (σ_next − σ)·N̂`.
pub fn euler_step(
    sample: &Image,
    noise: &Image,
    sigma: f64,
    sigma_next: f64,
    step: usize,
) -> Result<Image> {
    if sample.shape() != noise.shape() {
        return Err(RasError::shape(
            "euler_step",
            "sample and noise differ in shape",
        ));
    }
    if !(sigma_next < sigma) {
        return Err(RasError::InvalidConfig(format!(
            "sigma must decrease: {sigma} -> {sigma_next}"
        )));
    }
    let dt = (sigma_next - sigma) as f32;
    let mut out = sample.clone();
    for (s, n) in out.data_mut().iter_mut().zip(noise.data()) {
        *s += dt * n;
    }
    if !out.is_finite() {
        return Err(RasError::NonFiniteStep { step });
    }
    Ok(out)
}

/// Seed of the random metric at one step of a run.
fn step_seed(run_seed: u64, step: usize) -> u64 {
    run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step as u64)
}

/// Mutable state of one region-adaptive run.
#[derive(Clone, Debug)]
pub struct RasState {
    pub sample: Image,
    /// Last known prediction for every pixel; `None` before the first step.
    pub cached_noise: Option<Image>,
    pub drops: DropCounter,
    /// Next step to execute.
    pub step: usize,
    /// Patches to process at `step`.
    pub mask: PatchMask,
}

/// Step-by-step region-adaptive sampler. [`sample_ras`] drives it to the end.
pub struct RasSampler<'m> {
    model: &'m DitModel,
    sigmas: SigmaSchedule,
    schedule: RatioSchedule,
    config: RasConfig,
    seed: u64,
    class_id: Option<usize>,
    cache: KvCache,
    state: RasState,
    trace: RunTrace,
}

impl<'m> RasSampler<'m> {
    pub fn new(
        model: &'m DitModel,
        sigmas: &SigmaSchedule,
        config: &RasConfig,
        seed: u64,
        class_id: Option<usize>,
    ) -> Result<Self> {
        let schedule = config.schedule(sigmas.steps())?;
        let grid = model.config.grid();
        let p = grid.num_patches();
        let header = TraceHeader {
            grid_h: grid.grid_h(),
            grid_w: grid.grid_w(),
            num_patches: p,
            total_steps: sigmas.steps(),
            seed,
            class_id,
            metric: config.metric,
            starvation_scale: config.starvation_scale,
            attention_recovery: config.attention_recovery,
        };
        Ok(Self {
            model,
            sigmas: sigmas.clone(),
            schedule,
            config: config.clone(),
            seed,
            class_id,
            cache: model.new_cache(),
            state: RasState {
                sample: Image::standard_normal(grid.channels, grid.height, grid.width, seed),
                cached_noise: None,
                drops: DropCounter::new(p),
                step: 0,
                mask: PatchMask::all(p),
            },
            trace: RunTrace::new(header),
        })
    }

    pub fn state(&self) -> &RasState {
        &self.state
    }

    pub fn schedule(&self) -> &RatioSchedule {
        &self.schedule
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.sigmas.steps()
    }

    /// Executes one sampling step and returns its record.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let t = self.state.step;
        if self.is_done() {
            return Err(RasError::InvalidConfig("sampling already finished".into()));
        }
        let start = Instant::now();
        let grid = self.model.config.grid();
        let p = grid.num_patches();
        let ratio = self.schedule.ratio_for_step(t)?;
        let dense = ratio >= 1.0;
        if dense {
            self.state.mask = PatchMask::all(p);
        }
        let mask = self.state.mask.clone();
        let active: IndexSet = mask.active();
        let sigma = self.sigmas.sigma(t);
        let sigma_next = self.sigmas.sigma(t + 1);

        let mut flops = FlopCounter::default();
        let tokens = self
            .model
            .patchify(&self.state.sample, &active, Some(&mut flops))?;
        let out = self.model.forward(
            &tokens,
            sigma as f32,
            self.class_id,
            &mut self.cache,
            self.config.attention_recovery,
            Some(&mut flops),
        )?;
        if active.is_full() {
            self.cache.set_last_full_step(t);
        }
        let mut fresh = Image::zeros(grid.channels, grid.height, grid.width);
        unpatchify(&grid, &out, &active, &mut fresh)?;
        let merged = merge_noise(self.state.cached_noise.as_ref(), &fresh, &mask, &grid, t)?;
        self.state.sample = euler_step(&self.state.sample, &merged, sigma, sigma_next, t)?;

        if dense {
            if self.config.reset_drops_on_dense && !self.schedule.is_dense_step(t.saturating_sub(1))
            {
                self.state.drops.reset();
            }
        } else {
            update_drops(&mut self.state.drops, &mask)?;
        }
        let (stats, field) = compute_cache_scores(
            &merged,
            &grid,
            &self.state.drops,
            self.config.starvation_scale,
            self.config.metric,
            step_seed(self.seed, t),
        )?;
        self.state.cached_noise = Some(merged);
        if t + 1 < self.sigmas.steps() {
            let next_ratio = self.schedule.ratio_for_step(t + 1)?;
            self.state.mask = if next_ratio >= 1.0 {
                PatchMask::all(p)
            } else {
                select_active(&field, next_ratio)?
            };
        }
        self.state.step += 1;
        self.trace.steps.push(StepRecord {
            step: t,
            sigma,
            sigma_next,
            ratio,
            dense,
            active: active.indices().to_vec(),
            stats,
            scores: field.scores,
            flops,
            wall_us: start.elapsed().as_micros() as u64,
        });
        Ok(self.trace.steps.last().expect("just pushed"))
    }

    pub fn finish(mut self) -> Result<(Image, RunTrace)> {
        while !self.is_done() {
            self.step()?;
        }
        Ok((self.state.sample, self.trace))
    }
}

/// Region-adaptive Euler sampling from seeded Gaussian noise.
pub fn sample_ras(
    model: &DitModel,
    sigmas: &SigmaSchedule,
    config: &RasConfig,
    seed: u64,
    class_id: Option<usize>,
) -> Result<(Image, RunTrace)> {
    RasSampler::new(model, sigmas, config, seed, class_id)?.finish()
}

/// Plain Euler sampling through the dense reference forward.
pub fn sample_dense(
    model: &DitModel,
    sigmas: &SigmaSchedule,
    seed: u64,
    class_id: Option<usize>,
    flops: Option<&mut FlopCounter>,
) -> Result<Image> {
    let mut traj = sample_dense_trajectory(model, sigmas, seed, class_id, flops)?;
    Ok(traj.pop().expect("at least the initial sample"))
}

/// As [`sample_dense`], returning the sample before the first step and
/// after every step.
pub fn sample_dense_trajectory(
    model: &DitModel,
    sigmas: &SigmaSchedule,
    seed: u64,
    class_id: Option<usize>,
    mut flops: Option<&mut FlopCounter>,
) -> Result<Vec<Image>> {
    let grid = model.config.grid();
    let mut s = Image::standard_normal(grid.channels, grid.height, grid.width, seed);
    let mut out = vec![s.clone()];
    for t in 0..sigmas.steps() {
        let sigma = sigmas.sigma(t);
        let v = model.forward_dense(&s, sigma as f32, class_id, flops.as_deref_mut())?;
        s = euler_step(&s, &v, sigma, sigmas.sigma(t + 1), t)?;
        out.push(s.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ModelConfig;

    #[test]
    fn sigma_schedule_endpoints() {
        let s = SigmaSchedule::new(10, 1.0).unwrap();
        assert_eq!(s.sigmas().len(), 11);
        assert_eq!(s.sigma(0), 1.0);
        assert_eq!(s.sigma(10), 0.0);
        let shifted = SigmaSchedule::new(10, 3.0).unwrap();
        assert_eq!(shifted.sigma(0), 1.0);
        assert_eq!(shifted.sigma(10), 0.0);
        assert!(shifted.sigmas().windows(2).all(|w| w[1] < w[0]));
        assert!(shifted.sigma(5) > s.sigma(5));
        assert!(SigmaSchedule::from_sigmas(vec![1.0, 0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn euler_arithmetic() {
        let s = Image::from_vec(1, 1, 1, vec![0.0]).unwrap();
        let n = Image::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let out = euler_step(&s, &n, 1.0, 0.9, 0).unwrap();
        assert!((out.data()[0] + 0.1).abs() < 1e-7);
        let z = Image::zeros(1, 1, 1);
        let s = Image::from_vec(1, 1, 1, vec![3.5]).unwrap();
        assert_eq!(euler_step(&s, &z, 0.5, 0.25, 0).unwrap(), s);
        let inf = Image::from_vec(1, 1, 1, vec![f32::INFINITY]).unwrap();
        assert!(matches!(
            euler_step(&s, &inf, 0.5, 0.25, 7),
            Err(RasError::NonFiniteStep { step: 7 })
        ));
    }

    /// Gaussian data `x₀ ~ N(c, s²)` with `x₁ ~ N(0, 1)`: the marginal
    /// velocity is linear in `x` and the exact flow maps `z` at σ=1 to
    /// `c + s·z` at σ=0.
    fn gaussian_velocity(x: f64, sigma: f64, c: f64, s: f64) -> f64 {
        let a = 1.0 - sigma;
        let var = a * a * s * s + sigma * sigma;
        let centered = x - a * c;
        let e_x0 = c + a * s * s / var * centered;
        let e_x1 = sigma / var * centered;
        e_x1 - e_x0
    }

    fn euler_terminal_error(steps: usize) -> f64 {
        let (c, s, z) = (0.5, 0.2, 1.3);
        let sched = SigmaSchedule::new(steps, 1.0).unwrap();
        let mut x = Image::from_vec(1, 1, 1, vec![z as f32]).unwrap();
        for t in 0..steps {
            let v = gaussian_velocity(x.data()[0] as f64, sched.sigma(t), c, s);
            let n = Image::from_vec(1, 1, 1, vec![v as f32]).unwrap();
            x = euler_step(&x, &n, sched.sigma(t), sched.sigma(t + 1), t).unwrap();
        }
        (x.data()[0] as f64 - (c + s * z)).abs()
    }

    #[test]
    fn euler_converges_first_order() {
        let e40 = euler_terminal_error(40);
        let e20 = euler_terminal_error(20);
        let e10 = euler_terminal_error(10);
        assert!(e40 < 0.05);
        for (fine, coarse) in [(e40, e20), (e20, e10)] {
            let r = coarse / fine;
            assert!(r > 2.0 / 1.5 && r < 2.0 * 1.5, "ratio {r}");
        }
    }

    #[test]
    fn merge_examples() {
        let grid = PatchGrid::new(1, 4, 4, 2).unwrap();
        let cached = Image::filled(1, 4, 4, -1.0);
        let fresh = Image::filled(1, 4, 4, 1.0);
        let all = merge_noise(Some(&cached), &fresh, &PatchMask::all(4), &grid, 0).unwrap();
        assert_eq!(all, fresh);
        let none = merge_noise(Some(&cached), &fresh, &PatchMask::none(4), &grid, 0).unwrap();
        assert_eq!(none, cached);
        let checker = PatchMask::from_flags(vec![true, false, false, true]);
        let m = merge_noise(Some(&cached), &fresh, &checker, &grid, 0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = if (y / 2 + x / 2) % 2 == 0 { 1.0 } else { -1.0 };
                assert_eq!(m.get(0, y, x), want);
            }
        }
        assert!(matches!(
            merge_noise(None, &fresh, &checker, &grid, 5),
            Err(RasError::NoiseCacheUninitialized { step: 5 })
        ));
    }

    #[test]
    fn dense_ratio_matches_plain_sampler_bitwise() {
        let cfg = ModelConfig::tiny();
        let model = DitModel::random(&cfg, 8, 0.2).unwrap();
        let sigmas = SigmaSchedule::new(6, 1.0).unwrap();
        let (ras, trace) = sample_ras(&model, &sigmas, &RasConfig::dense(), 11, Some(2)).unwrap();
        let plain = sample_dense(&model, &sigmas, 11, Some(2), None).unwrap();
        assert_eq!(ras, plain);
        assert!(trace.steps.iter().all(|s| s.dense));
    }

    #[test]
    fn selective_run_keeps_counts() {
        let cfg = ModelConfig::tiny();
        let model = DitModel::random(&cfg, 9, 0.2).unwrap();
        let sigmas = SigmaSchedule::new(12, 1.0).unwrap();
        let rc = RasConfig {
            warmup_steps: 2,
            dense_reset_steps: vec![6],
            curve: CurveKind::Flat,
            ..RasConfig::default()
        };
        let (img, trace) = sample_ras(&model, &sigmas, &rc, 3, None).unwrap();
        assert!(img.is_finite());
        let dense: Vec<usize> = trace
            .steps
            .iter()
            .filter(|s| s.dense)
            .map(|s| s.step)
            .collect();
        assert_eq!(dense, vec![0, 1, 6]);
        for s in trace.steps.iter().filter(|s| !s.dense) {
            assert_eq!(s.active.len(), 8);
        }
    }
}
