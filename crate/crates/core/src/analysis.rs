//! Diagnostics over sampling runs: adjacent-step ranking continuity,
//! per-patch activation maps, and quality/cost against a dense reference.
//!
//! Ranking continuity uses NDCG with linear gains. For rankings `r_t` and
//! `r_{t+1}` (patch indices ordered by ascending score), patch `p` has
//! relevance `P − pos_t(p)`, and
//!
//! ```text
//! DCG  = Σ_i rel(r_{t+1}[i]) / log₂(i + 2)
//! NDCG = DCG / IDCG,   IDCG = DCG with r_{t+1} = r_t
//! ```

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dit::{analytic_forward_flops, DitModel, FlopCounter};
use crate::error::{RasError, Result};
use crate::image::{Image, PatchGrid};
use crate::region::{active_count, rank_ascending, RatioSchedule};
use crate::sampler::{sample_dense, sample_ras, RasConfig, SigmaSchedule};
use crate::trace::RunTrace;

fn check_permutation(perm: &[usize], n: usize, what: &str) -> Result<()> {
    if perm.len() != n {
        return Err(RasError::Permutation(format!(
            "{what} has {} entries, expected {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(RasError::Permutation(format!(
                "{what} is not a permutation of 0..{n}"
            )));
        }
    }
    Ok(())
}

fn discount(i: usize) -> f64 {
    1.0 / ((i + 2) as f64).log2()
}

/// Ranking similarity of two orderings of the same `P` patches, in `[0, 1]`.
pub fn ndcg_adjacent(rank_t: &[usize], rank_next: &[usize]) -> Result<f64> {
    let n = rank_t.len();
    if n == 0 {
        return Err(RasError::Permutation("empty ranking".into()));
    }
    check_permutation(rank_t, n, "rank_t")?;
    check_permutation(rank_next, n, "rank_next")?;
    let mut pos = vec![0; n];
    for (i, &p) in rank_t.iter().enumerate() {
        pos[p] = i;
    }
    let rel = |p: usize| (n - pos[p]) as f64;
    let dcg: f64 = rank_next
        .iter()
        .enumerate()
        .map(|(i, &p)| rel(p) * discount(i))
        .sum();
    let idcg: f64 = rank_t
        .iter()
        .enumerate()
        .map(|(i, &p)| rel(p) * discount(i))
        .sum();
    Ok(dcg / idcg)
}

/// Expected NDCG when `rank_next` is a uniformly random permutation:
/// every position receives mean relevance `(P+1)/2`.
pub fn random_ndcg_expectation(num_patches: usize) -> f64 {
    let n = num_patches;
    let disc: f64 = (0..n).map(discount).sum();
    let idcg: f64 = (0..n).map(|i| (n - i) as f64 * discount(i)).sum();
    (n as f64 + 1.0) / 2.0 * disc / idcg
}

/// Mean and standard deviation of NDCG against uniformly random
/// permutations, by Monte Carlo.
pub fn random_ndcg_baseline(num_patches: usize, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ident: Vec<usize> = (0..num_patches).collect();
    let mut perm = ident.clone();
    let vals: Vec<f64> = (0..samples)
        .map(|_| {
            perm.shuffle(&mut rng);
            ndcg_adjacent(&ident, &perm).expect("valid permutations")
        })
        .collect();
    mean_std(&vals)
}

/// Sample mean and (n−1) standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityPoint {
    /// The later step of the pair.
    pub step: usize,
    pub ndcg: f64,
}

/// NDCG between the patch rankings of every pair of adjacent steps. Each
/// step is ranked by its undamped per-patch statistic, which dense steps
/// record over the full field like any other step.
pub fn continuity_curve(trace: &RunTrace) -> Result<Vec<ContinuityPoint>> {
    let scored: Vec<_> = trace.steps.iter().filter(|s| !s.stats.is_empty()).collect();
    if scored.len() < 2 {
        return Err(RasError::InvalidTrace(format!(
            "continuity needs at least 2 scored steps, found {}",
            scored.len()
        )));
    }
    let mut out = Vec::with_capacity(scored.len() - 1);
    for w in scored.windows(2) {
        if w[1].step != w[0].step + 1 {
            continue;
        }
        let a = rank_ascending(&w[0].stats);
        let b = rank_ascending(&w[1].stats);
        out.push(ContinuityPoint {
            step: w[1].step,
            ndcg: ndcg_adjacent(&a, &b)?,
        });
    }
    if out.is_empty() {
        return Err(RasError::InvalidTrace("no adjacent scored steps".into()));
    }
    Ok(out)
}

/// Mean NDCG over the first and last thirds of a curve.
pub fn thirds(curve: &[ContinuityPoint]) -> (f64, f64) {
    let n = curve.len();
    let k = (n / 3).max(1);
    let first: Vec<f64> = curve[..k].iter().map(|c| c.ndcg).collect();
    let last: Vec<f64> = curve[n - k..].iter().map(|c| c.ndcg).collect();
    (mean_std(&first).0, mean_std(&last).0)
}

/// Per-patch count of steps in which the patch was active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub counts: Vec<usize>,
}

impl ActivationMap {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.counts[row * self.grid_w + col]
    }

    /// Grayscale bytes scaled so the largest count is white.
    pub fn heatmap(&self) -> Vec<u8> {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1);
        self.counts
            .iter()
            .map(|&c| ((c as f64 / max as f64) * 255.0).round() as u8)
            .collect()
    }

    /// Mean count over patches where `mask` is true and where it is false.
    pub fn split_means(&self, mask: &[bool]) -> Option<(f64, f64)> {
        if mask.len() != self.counts.len() {
            return None;
        }
        let (mut a, mut na, mut b, mut nb) = (0.0, 0, 0.0, 0);
        for (&c, &m) in self.counts.iter().zip(mask) {
            if m {
                a += c as f64;
                na += 1;
            } else {
                b += c as f64;
                nb += 1;
            }
        }
        if na == 0 || nb == 0 {
            return None;
        }
        Some((a / na as f64, b / nb as f64))
    }
}

pub fn drop_count_map(trace: &RunTrace) -> Result<ActivationMap> {
    let h = &trace.header;
    let mut counts = vec![0usize; h.num_patches];
    for s in &trace.steps {
        for &p in &s.active {
            let c = counts.get_mut(p).ok_or_else(|| {
                RasError::InvalidTrace(format!("step {} activates patch {p}", s.step))
            })?;
            *c += 1;
        }
    }
    Ok(ActivationMap {
        grid_h: h.grid_h,
        grid_w: h.grid_w,
        counts,
    })
}

/// Foreground cut for generated shapes. The background sits at −1 and the
/// faintest shape at 0, so a cut at 0 would drop faint shapes entirely.
pub const FOREGROUND_THRESHOLD: f32 = -0.5;

/// Patches whose mean value exceeds `threshold`.
pub fn foreground_patches(image: &Image, grid: &PatchGrid, threshold: f32) -> Result<Vec<bool>> {
    grid.check_image(image)?;
    let mut buf = vec![0.0; grid.patch_dim()];
    Ok((0..grid.num_patches())
        .map(|p| {
            grid.read_patch(image, p, &mut buf);
            buf.iter().sum::<f32>() / buf.len() as f32 > threshold
        })
        .collect())
}

/// Closed-form FLOPs of a whole run under `schedule`.
pub fn analytic_run_flops(
    model: &crate::dit::ModelConfig,
    schedule: &RatioSchedule,
    attention_recovery: bool,
) -> Result<FlopCounter> {
    let p = model.num_patches();
    let mut total = FlopCounter::default();
    for t in 0..schedule.total_steps {
        let n = active_count(schedule.ratio_for_step(t)?, p);
        let keys = if attention_recovery { p } else { n };
        total += analytic_forward_flops(model, n, keys);
    }
    Ok(total)
}

/// One sampling configuration in a quality sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityConfig {
    pub label: String,
    pub steps: usize,
    pub ras: RasConfig,
}

impl QualityConfig {
    pub fn dense(steps: usize) -> Self {
        Self {
            label: format!("dense-{steps}"),
            steps,
            ras: RasConfig::dense(),
        }
    }

    pub fn ras(steps: usize, ras: RasConfig) -> Self {
        Self {
            label: format!("ras-{steps}@{}", ras.average_ratio),
            steps,
            ras,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub label: String,
    pub steps: usize,
    pub average_ratio: f64,
    /// Per-seed MSE against the reference, in seed order.
    pub mse: Vec<f64>,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    /// Counted FLOPs of one sample.
    pub flops: FlopCounter,
    /// Closed-form FLOPs of one sample.
    pub analytic_flops: FlopCounter,
    /// Wall time summed over seeds.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub reference_steps: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<QualityRow>,
}

/// Peak-to-peak range of model images.
pub const PSNR_PEAK: f64 = 2.0;

pub fn psnr(mse: f64) -> f64 {
    10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
}

/// Samples every config for every seed and compares against the dense
/// sampler at `reference_steps` with the same seed and class. The class
/// of seed `s` is `class_of(s)`.
pub fn quality_vs_dense(
    model: &DitModel,
    configs: &[QualityConfig],
    seeds: &[u64],
    reference_steps: usize,
    class_of: impl Fn(u64) -> Option<usize>,
) -> Result<QualityReport> {
    let ref_sigmas = SigmaSchedule::new(reference_steps, 1.0)?;
    let references = seeds
        .iter()
        .map(|&s| sample_dense(model, &ref_sigmas, s, class_of(s), None))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let sigmas = SigmaSchedule::new(cfg.steps, 1.0)?;
        let schedule = cfg.ras.schedule(cfg.steps)?;
        let analytic = analytic_run_flops(&model.config, &schedule, cfg.ras.attention_recovery)?;
        let mut mse = Vec::with_capacity(seeds.len());
        let mut flops = FlopCounter::default();
        let start = Instant::now();
        for (&seed, reference) in seeds.iter().zip(&references) {
            let (img, trace) = sample_ras(model, &sigmas, &cfg.ras, seed, class_of(seed))?;
            mse.push(img.mse(reference));
            flops = trace.total_flops();
        }
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let mean_mse = mean_std(&mse).0;
        let mean_psnr = mean_std(&mse.iter().map(|&m| psnr(m)).collect::<Vec<_>>()).0;
        rows.push(QualityRow {
            label: cfg.label.clone(),
            steps: cfg.steps,
            average_ratio: cfg.ras.average_ratio,
            mse,
            mean_mse,
            mean_psnr,
            flops,
            analytic_flops: analytic,
            wall_ms,
        });
    }
    Ok(QualityReport {
        reference_steps,
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ModelConfig;
    use crate::region::{CurveKind, MetricKind};
    use crate::trace::{StepRecord, TraceHeader};

    /// All `n!` permutations, by Heap's algorithm.
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k <= 1 {
                out.push(a.clone());
                return;
            }
            for i in 0..k {
                heap(k - 1, a, out);
                let j = if k.is_multiple_of(2) { i } else { 0 };
                a.swap(j, k - 1);
            }
        }
        let mut a: Vec<usize> = (0..n).collect();
        let mut out = Vec::new();
        heap(n, &mut a, &mut out);
        out
    }

    #[test]
    fn identical_rankings_score_one() {
        for perm in permutations(4) {
            assert!((ndcg_adjacent(&perm, &perm).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn three_patch_reversal() {
        // rel = (3, 2, 1) for patches (0, 1, 2).
        // DCG = 1/log2(2) + 2/log2(3) + 3/log2(4) = 1 + 1.26186 + 1.5
        // IDCG = 3 + 2/log2(3) + 1/2 = 4.76186
        let v = ndcg_adjacent(&[0, 1, 2], &[2, 1, 0]).unwrap();
        let dcg = 1.0 + 2.0 / 3f64.log2() + 1.5;
        let idcg = 3.0 + 2.0 / 3f64.log2() + 0.5;
        assert_eq!(v, dcg / idcg);
        assert!((v - 0.789_998_004_246).abs() < 1e-12);
        // The reversal is the unique minimum over all 6 orderings.
        let all = permutations(3);
        let min = all
            .iter()
            .map(|p| ndcg_adjacent(&[0, 1, 2], p).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min, v);
    }

    #[test]
    fn relabeling_invariance() {
        let a = vec![3, 0, 2, 1, 4];
        let b = vec![0, 3, 1, 4, 2];
        let relabel = [2, 4, 0, 1, 3];
        let ra: Vec<usize> = a.iter().map(|&p| relabel[p]).collect();
        let rb: Vec<usize> = b.iter().map(|&p| relabel[p]).collect();
        assert_eq!(
            ndcg_adjacent(&a, &b).unwrap(),
            ndcg_adjacent(&ra, &rb).unwrap()
        );
    }

    #[test]
    fn malformed_permutations_rejected() {
        assert!(ndcg_adjacent(&[0, 1, 1], &[0, 1, 2]).is_err());
        assert!(ndcg_adjacent(&[0, 1, 2], &[0, 1]).is_err());
        assert!(ndcg_adjacent(&[0, 1, 3], &[0, 1, 2]).is_err());
        assert!(ndcg_adjacent(&[], &[]).is_err());
    }

    #[test]
    fn closed_form_random_expectation_matches_enumeration() {
        for n in 1..=5 {
            let all = permutations(n);
            let ident: Vec<usize> = (0..n).collect();
            let mean = all
                .iter()
                .map(|p| ndcg_adjacent(&ident, p).unwrap())
                .sum::<f64>()
                / all.len() as f64;
            assert!((mean - random_ndcg_expectation(n)).abs() < 1e-12);
        }
    }

    fn trace_with(active: Vec<Vec<usize>>, p: usize) -> RunTrace {
        let mut t = RunTrace::new(TraceHeader {
            grid_h: 1,
            grid_w: p,
            num_patches: p,
            total_steps: active.len(),
            seed: 0,
            class_id: None,
            metric: MetricKind::Std,
            starvation_scale: 0.3,
            attention_recovery: true,
        });
        for (i, a) in active.into_iter().enumerate() {
            t.steps.push(StepRecord {
                step: i,
                sigma: 1.0,
                sigma_next: 0.5,
                ratio: a.len() as f64 / p as f64,
                dense: a.len() == p,
                active: a,
                stats: (0..p).map(|j| ((i * 7 + j * 3) % p) as f64).collect(),
                scores: vec![0.0; p],
                flops: FlopCounter::default(),
                wall_us: 0,
            });
        }
        t
    }

    #[test]
    fn activation_map_counts() {
        let t = trace_with(vec![vec![0, 1, 2, 3], vec![1, 3], vec![0, 1]], 4);
        let m = drop_count_map(&t).unwrap();
        assert_eq!(m.counts, vec![2, 3, 1, 2]);
        assert_eq!(m.total(), 8);
        assert_eq!(m.heatmap(), vec![170, 255, 85, 170]);
        assert_eq!(m.split_means(&[true, true, false, false]), Some((2.5, 1.5)));
        let curve = continuity_curve(&t).unwrap();
        assert_eq!(curve.len(), 2);
        assert!(continuity_curve(&trace_with(vec![vec![0]], 4)).is_err());
    }

    #[test]
    fn flops_of_standard_schedule() {
        let cfg = ModelConfig::small();
        let rc = RasConfig {
            curve: CurveKind::Flat,
            ..RasConfig::default()
        };
        let ras = analytic_run_flops(&cfg, &rc.schedule(30).unwrap(), true).unwrap();
        let dense =
            analytic_run_flops(&cfg, &RasConfig::dense().schedule(30).unwrap(), true).unwrap();
        let ratio = ras.token_linear as f64 / dense.token_linear as f64;
        assert!((ratio - 0.6).abs() < 1e-12, "{ratio}");
    }

    #[test]
    fn self_reference_has_zero_error() {
        let cfg = ModelConfig::tiny();
        let model = DitModel::random(&cfg, 2, 0.2).unwrap();
        let report =
            quality_vs_dense(&model, &[QualityConfig::dense(6)], &[1, 2], 6, |_| Some(1)).unwrap();
        assert_eq!(report.rows[0].mse, vec![0.0, 0.0]);
        assert_eq!(report.rows[0].flops, report.rows[0].analytic_flops);
    }
}
