//! Patch cacheability scores, drop counting and active-mask selection.
//!
//! Each step the merged noise prediction is reduced to one score per patch:
//! a per-token statistic across channels, averaged over the patch, damped
//! by how often the patch has already been dropped. Patches with the lowest
//! scores are processed next step; the rest reuse their cached prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RasError, Result};
use crate::image::{Image, PatchGrid};
use crate::tensor::{IndexSet, Matrix};

/// Guards the reciprocal of the L2 statistic.
pub const L2_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// Standard deviation across channels; high spread is cacheable.
    #[default]
    Std,
    /// Reciprocal L2 norm; large-norm regions stay active.
    L2norm,
    /// I.i.d. uniform scores, the selection baseline.
    Random,
}

impl std::str::FromStr for MetricKind {
    type Err = RasError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(Self::Std),
            "l2norm" | "l2" => Ok(Self::L2norm),
            "random" => Ok(Self::Random),
            other => Err(RasError::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }
}

/// Per-patch active flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    flags: Vec<bool>,
}

impl PatchMask {
    pub fn all(num_patches: usize) -> Self {
        Self {
            flags: vec![true; num_patches],
        }
    }

    pub fn none(num_patches: usize) -> Self {
        Self {
            flags: vec![false; num_patches],
        }
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn from_active(active: &[usize], num_patches: usize) -> Result<Self> {
        let mut flags = vec![false; num_patches];
        for &p in active {
            if p >= num_patches {
                return Err(RasError::IndexOutOfRange {
                    index: p,
                    len: num_patches,
                });
            }
            flags[p] = true;
        }
        Ok(Self { flags })
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn num_patches(&self) -> usize {
        self.flags.len()
    }

    pub fn count_active(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn is_active(&self, p: usize) -> bool {
        self.flags[p]
    }

    pub fn is_all(&self) -> bool {
        self.flags.iter().all(|f| *f)
    }

    pub fn active(&self) -> IndexSet {
        IndexSet::from_mask(&self.flags)
    }
}

/// How many selective steps each patch has been left out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounter {
    counts: Vec<u32>,
}

impl DropCounter {
    pub fn new(num_patches: usize) -> Self {
        Self {
            counts: vec![0; num_patches],
        }
    }

    pub fn from_counts(counts: Vec<u32>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }
}

/// Higher means more cacheable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheScoreField {
    pub scores: Vec<f64>,
}

/// Per-patch cacheability before drop damping, from tokens grouped by
/// patch: `tokens` has one row per token, patch-major, `tokens_per_patch`
/// consecutive rows per patch; columns are channels.
pub fn patch_statistics(
    tokens: &Matrix,
    tokens_per_patch: usize,
    metric: MetricKind,
) -> Result<Vec<f64>> {
    if tokens_per_patch == 0 || !tokens.rows().is_multiple_of(tokens_per_patch) {
        return Err(RasError::shape(
            "patch_statistics",
            format!(
                "{} tokens do not split into patches of {tokens_per_patch}",
                tokens.rows()
            ),
        ));
    }
    if !tokens.is_finite() {
        return Err(RasError::NonFinite("noise field".into()));
    }
    let num_patches = tokens.rows() / tokens_per_patch;
    let mut out = Vec::with_capacity(num_patches);
    for p in 0..num_patches {
        let mut acc = 0.0f64;
        for t in 0..tokens_per_patch {
            let row = tokens.row(p * tokens_per_patch + t);
            acc += token_statistic(row, metric);
        }
        let mean = acc / tokens_per_patch as f64;
        out.push(match metric {
            MetricKind::Std => mean,
            MetricKind::L2norm => 1.0 / (mean + L2_EPSILON),
            MetricKind::Random => 0.0,
        });
    }
    Ok(out)
}

fn token_statistic(values: &[f32], metric: MetricKind) -> f64 {
    match metric {
        MetricKind::Std => {
            let n = values.len() as f64;
            let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = values
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            var.sqrt()
        }
        MetricKind::L2norm => values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt(),
        MetricKind::Random => 0.0,
    }
}

/// Groups an image into the token layout of [`patch_statistics`]. A token is
/// one pixel's channel vector; single-channel images use the whole
/// flattened patch as the token, since a one-value spread is always zero.
pub fn patch_tokens(noise: &Image, grid: &PatchGrid) -> Result<(Matrix, usize)> {
    grid.check_image(noise)?;
    let p = grid.num_patches();
    let c = grid.channels;
    let mut buf = vec![0.0; grid.patch_dim()];
    if c == 1 {
        let mut m = Matrix::zeros(p, grid.patch_dim());
        for i in 0..p {
            grid.read_patch(noise, i, m.row_mut(i));
        }
        return Ok((m, 1));
    }
    let per = grid.patch_size * grid.patch_size;
    let mut m = Matrix::zeros(p * per, c);
    for i in 0..p {
        grid.read_patch(noise, i, &mut buf);
        for t in 0..per {
            m.row_mut(i * per + t)
                .copy_from_slice(&buf[t * c..(t + 1) * c]);
        }
    }
    Ok((m, per))
}

/// Applies drop damping `s = m · exp(−k·D)` to per-patch statistics.
///
/// The factor is applied as `D` successive multiplications by `exp(−k)`,
/// so one more drop scales a score by exactly `exp(−k)` in floating point.
pub fn damp_scores(stats: &[f64], drops: &DropCounter, k: f64) -> Result<CacheScoreField> {
    if stats.len() != drops.len() {
        return Err(RasError::shape(
            "damp_scores",
            format!("{} patches, {} drop counts", stats.len(), drops.len()),
        ));
    }
    if !(k >= 0.0 && k.is_finite()) {
        return Err(RasError::InvalidConfig(format!("starvation scale {k}")));
    }
    let factor = (-k).exp();
    let scores = stats
        .iter()
        .zip(drops.counts())
        .map(|(&m, &d)| (0..d).fold(m, |s, _| s * factor))
        .collect();
    Ok(CacheScoreField { scores })
}

fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

/// Scores from an image-shaped noise field. Returns the undamped
/// statistics alongside the damped scores. `seed` is used only by
/// [`MetricKind::Random`].
pub fn compute_cache_scores(
    noise: &Image,
    grid: &PatchGrid,
    drops: &DropCounter,
    k: f64,
    metric: MetricKind,
    seed: u64,
) -> Result<(Vec<f64>, CacheScoreField)> {
    if !noise.is_finite() {
        return Err(RasError::NonFinite("noise field".into()));
    }
    if metric == MetricKind::Random {
        let s = random_scores(grid.num_patches(), seed);
        return Ok((s.clone(), CacheScoreField { scores: s }));
    }
    let (tokens, per) = patch_tokens(noise, grid)?;
    let stats = patch_statistics(&tokens, per, metric)?;
    let field = damp_scores(&stats, drops, k)?;
    Ok((stats, field))
}

/// As [`compute_cache_scores`] over pre-grouped tokens.
pub fn compute_cache_scores_tokens(
    tokens: &Matrix,
    tokens_per_patch: usize,
    drops: &DropCounter,
    k: f64,
    metric: MetricKind,
    seed: u64,
) -> Result<CacheScoreField> {
    if metric == MetricKind::Random {
        if !tokens.is_finite() {
            return Err(RasError::NonFinite("noise field".into()));
        }
        return Ok(CacheScoreField {
            scores: random_scores(drops.len(), seed),
        });
    }
    let stats = patch_statistics(tokens, tokens_per_patch, metric)?;
    damp_scores(&stats, drops, k)
}

/// `ceil(ρ · P)`, with a small tolerance so that products that land on an
/// integer up to rounding are not bumped.
pub fn active_count(ratio: f64, num_patches: usize) -> usize {
    let raw = ratio * num_patches as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(num_patches)
}

/// Patch indices ordered by ascending score, ties by ascending index.
pub fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Activates the `ceil(ρ·P)` patches with the lowest scores.
pub fn select_active(scores: &CacheScoreField, ratio: f64) -> Result<PatchMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(RasError::InvalidConfig(format!(
            "sampling ratio {ratio} outside (0, 1]"
        )));
    }
    if scores.scores.iter().any(|s| !s.is_finite()) {
        return Err(RasError::NonFinite("cache scores".into()));
    }
    let n = scores.scores.len();
    let count = active_count(ratio, n);
    let mut mask = PatchMask::none(n);
    for &p in rank_ascending(&scores.scores).iter().take(count) {
        mask.flags[p] = true;
    }
    Ok(mask)
}

/// Adds one to the count of every inactive patch.
pub fn update_drops(drops: &mut DropCounter, mask: &PatchMask) -> Result<()> {
    if drops.len() != mask.num_patches() {
        return Err(RasError::shape(
            "update_drops",
            format!("{} counts, {} mask flags", drops.len(), mask.num_patches()),
        ));
    }
    for (c, &active) in drops.counts.iter_mut().zip(mask.flags()) {
        if !active {
            *c += 1;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    /// The same ratio at every selective step.
    Flat,
    /// Linear decrease across selective steps from `avg + spread/2` to
    /// `avg − spread/2`, narrowed if needed to stay inside (0, 1].
    #[default]
    Linear,
}

impl std::str::FromStr for CurveKind {
    type Err = RasError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Self::Flat),
            "linear" => Ok(Self::Linear),
            other => Err(RasError::InvalidConfig(format!("unknown curve {other:?}"))),
        }
    }
}

/// Default spread of the linear ratio curve.
pub const DEFAULT_SPREAD: f64 = 0.2;
/// Lowest ratio the linear curve may reach.
const MIN_CURVE_RATIO: f64 = 0.05;

/// Resolved per-step ratios and selection policy for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub dense_reset_steps: Vec<usize>,
    pub ratio_curve: Vec<f64>,
    pub starvation_scale: f64,
    pub metric: MetricKind,
}

impl RatioSchedule {
    /// Builds the schedule for `total_steps` steps. Selective steps get the
    /// curve values; warmup and reset steps get 1.
    pub fn build(
        total_steps: usize,
        warmup_steps: usize,
        dense_reset_steps: &[usize],
        average_ratio: f64,
        curve: CurveKind,
        spread: f64,
        starvation_scale: f64,
        metric: MetricKind,
    ) -> Result<Self> {
        if total_steps == 0 {
            return Err(RasError::InvalidConfig(
                "total steps must be positive".into(),
            ));
        }
        if !(average_ratio > 0.0 && average_ratio <= 1.0) {
            return Err(RasError::InvalidConfig(format!(
                "average ratio {average_ratio} outside (0, 1]"
            )));
        }
        if !(starvation_scale >= 0.0 && starvation_scale.is_finite()) {
            return Err(RasError::InvalidConfig(format!(
                "starvation scale {starvation_scale} must be >= 0"
            )));
        }
        if warmup_steps == 0 {
            return Err(RasError::InvalidConfig(
                "at least one warmup step is needed to fill the caches".into(),
            ));
        }
        if warmup_steps > total_steps {
            return Err(RasError::InvalidConfig(format!(
                "warmup {warmup_steps} exceeds {total_steps} steps"
            )));
        }
        for &s in dense_reset_steps {
            if s < warmup_steps {
                return Err(RasError::InvalidConfig(format!(
                    "dense reset step {s} falls inside warmup ({warmup_steps} steps)"
                )));
            }
            if s >= total_steps {
                return Err(RasError::InvalidConfig(format!(
                    "dense reset step {s} beyond {total_steps} steps"
                )));
            }
        }
        let mut resets = dense_reset_steps.to_vec();
        resets.sort_unstable();
        resets.dedup();

        let is_dense = |t: usize| t < warmup_steps || resets.binary_search(&t).is_ok();
        let selective: Vec<usize> = (0..total_steps).filter(|&t| !is_dense(t)).collect();
        let mut ratio_curve = vec![1.0; total_steps];
        let n = selective.len();
        let half = match curve {
            CurveKind::Flat => 0.0,
            CurveKind::Linear => (spread.max(0.0) / 2.0)
                .min(1.0 - average_ratio)
                .min((average_ratio - MIN_CURVE_RATIO).max(0.0)),
        };
        for (i, &t) in selective.iter().enumerate() {
            let frac = if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.5
            };
            ratio_curve[t] = average_ratio + half * (1.0 - 2.0 * frac);
        }
        Ok(Self {
            total_steps,
            warmup_steps,
            dense_reset_steps: resets,
            ratio_curve,
            starvation_scale,
            metric,
        })
    }

    pub fn is_dense_step(&self, t: usize) -> bool {
        t < self.warmup_steps || self.dense_reset_steps.binary_search(&t).is_ok()
    }

    /// Target ratio for step `t`.
    pub fn ratio_for_step(&self, t: usize) -> Result<f64> {
        if t >= self.total_steps {
            return Err(RasError::InvalidConfig(format!(
                "step {t} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if self.is_dense_step(t) {
            return Ok(1.0);
        }
        Ok(self.ratio_curve[t])
    }

    /// Mean ratio over selective steps.
    pub fn selective_mean(&self) -> f64 {
        let sel: Vec<f64> = (0..self.total_steps)
            .filter(|&t| !self.is_dense_step(t))
            .map(|t| self.ratio_curve[t])
            .collect();
        if sel.is_empty() {
            1.0
        } else {
            sel.iter().sum::<f64>() / sel.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line reference: per-token population std or L2 over
    /// channels, mean over the patch, then the cacheability transform and
    /// exp damping.
    fn brute_force(
        patches: &[Vec<Vec<f64>>],
        drops: &[u32],
        k: f64,
        metric: MetricKind,
    ) -> Vec<f64> {
        patches
            .iter()
            .zip(drops)
            .map(|(toks, &d)| {
                let mut s = 0.0;
                for t in toks {
                    let n = t.len() as f64;
                    s += match metric {
                        MetricKind::Std => {
                            let mu = t.iter().sum::<f64>() / n;
                            (t.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt()
                        }
                        _ => t.iter().map(|x| x * x).sum::<f64>().sqrt(),
                    };
                }
                let mean = s / toks.len() as f64;
                let m = match metric {
                    MetricKind::Std => mean,
                    _ => 1.0 / (mean + 1e-8),
                };
                m * (-k * d as f64).exp()
            })
            .collect()
    }

    fn tokens_of(patches: &[Vec<Vec<f64>>]) -> Matrix {
        let rows: Vec<Vec<f32>> = patches
            .iter()
            .flatten()
            .map(|t| t.iter().map(|&v| v as f32).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn small_field_matches_brute_force() {
        let patches = vec![
            vec![vec![1.0, 3.0], vec![2.0, 6.0]],
            vec![vec![0.0, 0.0], vec![5.0, 5.0]],
        ];
        let drops = DropCounter::from_counts(vec![0, 2]);
        for metric in [MetricKind::Std, MetricKind::L2norm] {
            let got = compute_cache_scores_tokens(&tokens_of(&patches), 2, &drops, 0.5, metric, 0)
                .unwrap();
            let want = brute_force(&patches, drops.counts(), 0.5, metric);
            for (g, w) in got.scores.iter().zip(&want) {
                assert!((g - w).abs() < 1e-6, "{metric:?}: {g} vs {w}");
            }
        }
        // Hand values: patch 0 has token stds 1 and 2.
        let got =
            compute_cache_scores_tokens(&tokens_of(&patches), 2, &drops, 0.5, MetricKind::Std, 0)
                .unwrap();
        assert!((got.scores[0] - 1.5).abs() < 1e-12);
        assert_eq!(got.scores[1], 0.0);
    }

    #[test]
    fn constant_field_scores_zero() {
        let grid = PatchGrid::new(3, 4, 4, 2).unwrap();
        let img = Image::filled(3, 4, 4, 0.7);
        let (_, s) =
            compute_cache_scores(&img, &grid, &DropCounter::new(4), 0.3, MetricKind::Std, 0)
                .unwrap();
        assert!(s.scores.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_drops_leave_statistic_unchanged() {
        let grid = PatchGrid::new(2, 4, 4, 2).unwrap();
        let img = Image::standard_normal(2, 4, 4, 1);
        let (stats, s) =
            compute_cache_scores(&img, &grid, &DropCounter::new(4), 0.8, MetricKind::Std, 0)
                .unwrap();
        assert_eq!(stats, s.scores);
    }

    #[test]
    fn single_channel_uses_whole_patch() {
        let grid = PatchGrid::new(1, 2, 2, 2).unwrap();
        let img = Image::from_vec(1, 2, 2, vec![1.0, 3.0, 1.0, 3.0]).unwrap();
        let (_, s) =
            compute_cache_scores(&img, &grid, &DropCounter::new(1), 0.0, MetricKind::Std, 0)
                .unwrap();
        assert!((s.scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_noise() {
        let grid = PatchGrid::new(1, 2, 2, 2).unwrap();
        let img = Image::from_vec(1, 2, 2, vec![1.0, f32::NAN, 1.0, 3.0]).unwrap();
        assert!(
            compute_cache_scores(&img, &grid, &DropCounter::new(1), 0.0, MetricKind::Std, 0)
                .is_err()
        );
    }

    #[test]
    fn select_examples() {
        let s = CacheScoreField {
            scores: vec![0.9, 0.1, 0.5, 0.7],
        };
        assert_eq!(select_active(&s, 0.5).unwrap().active().indices(), &[1, 2]);
        assert!(select_active(&s, 1.0).unwrap().is_all());
        let flat = CacheScoreField {
            scores: vec![0.2; 16],
        };
        assert_eq!(
            select_active(&flat, 0.25).unwrap().active().indices(),
            &[0, 1, 2, 3]
        );
        assert!(select_active(&s, 0.0).is_err());
        assert!(select_active(&s, 1.5).is_err());
    }

    #[test]
    fn active_count_tolerates_rounding() {
        assert_eq!(active_count(0.3, 10), 3);
        assert_eq!(active_count(0.5, 64), 32);
        assert_eq!(active_count(0.51, 64), 33);
        assert_eq!(active_count(1.0, 7), 7);
    }

    #[test]
    fn drop_updates() {
        let mut d = DropCounter::from_counts(vec![0, 3, 1]);
        update_drops(&mut d, &PatchMask::from_active(&[0], 3).unwrap()).unwrap();
        assert_eq!(d.counts(), &[0, 4, 2]);
        update_drops(&mut d, &PatchMask::all(3)).unwrap();
        assert_eq!(d.counts(), &[0, 4, 2]);
        update_drops(&mut d, &PatchMask::none(3)).unwrap();
        assert_eq!(d.counts(), &[1, 5, 3]);
    }

    #[test]
    fn schedule_examples() {
        let s = RatioSchedule::build(
            28,
            4,
            &[],
            0.5,
            CurveKind::Linear,
            0.2,
            0.3,
            MetricKind::Std,
        )
        .unwrap();
        assert_eq!(s.ratio_for_step(2).unwrap(), 1.0);
        assert!((s.selective_mean() - 0.5).abs() < 1e-12);
        assert!((s.ratio_for_step(4).unwrap() - 0.6).abs() < 1e-12);
        assert!((s.ratio_for_step(27).unwrap() - 0.4).abs() < 1e-12);

        let s = RatioSchedule::build(
            30,
            4,
            &[12, 20],
            0.5,
            CurveKind::Flat,
            0.0,
            0.3,
            MetricKind::Std,
        )
        .unwrap();
        assert_eq!(s.ratio_for_step(20).unwrap(), 1.0);
        assert_eq!(s.ratio_for_step(12).unwrap(), 1.0);
        assert_eq!(s.ratio_for_step(13).unwrap(), 0.5);
        assert!(s.ratio_for_step(30).is_err());
    }

    #[test]
    fn schedule_validation() {
        let bad =
            RatioSchedule::build(30, 4, &[2], 0.5, CurveKind::Flat, 0.0, 0.3, MetricKind::Std);
        assert!(matches!(bad, Err(RasError::InvalidConfig(_))));
        assert!(RatioSchedule::build(
            30,
            4,
            &[30],
            0.5,
            CurveKind::Flat,
            0.0,
            0.3,
            MetricKind::Std
        )
        .is_err());
        assert!(
            RatioSchedule::build(30, 4, &[], 0.0, CurveKind::Flat, 0.0, 0.3, MetricKind::Std)
                .is_err()
        );
        assert!(
            RatioSchedule::build(30, 4, &[], 0.5, CurveKind::Flat, 0.0, -1.0, MetricKind::Std)
                .is_err()
        );
    }

    #[test]
    fn linear_curve_stays_in_range() {
        let s = RatioSchedule::build(
            30,
            4,
            &[12, 20],
            0.95,
            CurveKind::Linear,
            0.2,
            0.3,
            MetricKind::Std,
        )
        .unwrap();
        for t in 0..30 {
            let r = s.ratio_for_step(t).unwrap();
            assert!(r > 0.0 && r <= 1.0);
        }
        assert!((s.selective_mean() - 0.95).abs() < 1e-12);
    }
}
