//! The `ras` command line: train, sample, compare, analyze, bench.
//!
//! Settings come from an optional TOML file (`--config`) and are then
//! overridden by flags. The merged [`RunConfig`] is validated before any
//! output is written and saved as `run_config.toml` in the output
//! directory. On failure the last line on stderr is a JSON object
//! `{"error": {"kind": ..., "message": ...}}` and the exit status is 1.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    continuity_curve, drop_count_map, foreground_patches, mean_std, quality_vs_dense,
    random_ndcg_baseline, thirds, QualityConfig, FOREGROUND_THRESHOLD,
};
use crate::checkpoint::{self, CheckpointConfig};
use crate::dit::{DitModel, ModelConfig};
use crate::error::{RasError, Result};
use crate::export;
use crate::region::{CurveKind, MetricKind};
use crate::sampler::{sample_dense, sample_ras, RasConfig, SigmaSchedule};
use crate::tensor::{gather_gemm, gemm, gemm_scatter, IndexSet, Matrix};
use crate::training::{moving_average, train, ShapeKind, ShapesDataset, TrainConfig};

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "RAS_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Tiny,
    Small,
    Default,
}

impl ModelPreset {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelPreset::Tiny => ModelConfig::tiny(),
            ModelPreset::Small => ModelConfig::small(),
            ModelPreset::Default => ModelConfig::default(),
        }
    }
}

/// One `(steps, average ratio)` point of a comparison grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub steps: usize,
    pub ratio: f64,
}

impl std::str::FromStr for GridPoint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (t, r) = s
            .split_once(':')
            .ok_or_else(|| format!("grid point {s:?} is not STEPS:RATIO"))?;
        Ok(GridPoint {
            steps: t.trim().parse().map_err(|e| format!("{t:?}: {e}"))?,
            ratio: r.trim().parse().map_err(|e| format!("{r:?}: {e}"))?,
        })
    }
}

/// Every knob of a run, as saved next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub steps: usize,
    pub shift: f64,
    pub class_id: Option<usize>,
    /// Number of seeds, starting at `seed`.
    pub samples: usize,
    /// Use the plain dense sampler instead of the region-adaptive one.
    pub dense: bool,
    pub ras: RasConfig,
    pub grid: Vec<GridPoint>,
    pub reference_steps: usize,
    pub model: ModelPreset,
    pub train: TrainConfig,
    pub bench_rows: usize,
    pub bench_dim: usize,
    pub bench_active: f64,
    pub bench_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            steps: 30,
            shift: 1.0,
            class_id: None,
            samples: 1,
            dense: false,
            ras: RasConfig::default(),
            grid: vec![
                GridPoint {
                    steps: 30,
                    ratio: 1.0,
                },
                GridPoint {
                    steps: 30,
                    ratio: 0.5,
                },
                GridPoint {
                    steps: 15,
                    ratio: 1.0,
                },
            ],
            reference_steps: 30,
            model: ModelPreset::Small,
            train: TrainConfig::default(),
            bench_rows: 4096,
            bench_dim: 1024,
            bench_active: 0.25,
            bench_repeats: 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ras",
    about = "Region-adaptive sampling for a toy diffusion transformer"
)]
pub struct Cli {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on procedural shapes.
    Train(TrainArgs),
    /// Draw samples and their run traces.
    Sample(SampleArgs),
    /// Quality and cost of a grid of settings against a dense reference.
    Compare(SampleArgs),
    /// Ranking continuity and per-patch activation maps.
    Analyze(SampleArgs),
    /// Kernel and end-to-end timings.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub model: Option<ModelPreset>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sampling steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub shift: Option<f64>,
    /// Dense warmup steps W.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Comma-separated dense reset steps; empty for none.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub dense_reset: Option<Vec<usize>>,
    /// Average sampling ratio over selective steps.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub curve: Option<CurveKind>,
    /// Starvation scale k.
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub metric: Option<MetricKind>,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Use the plain dense sampler.
    #[arg(long)]
    pub dense: bool,
    /// Attend over active tokens only instead of the cached full sequence.
    #[arg(long)]
    pub no_recovery: bool,
    #[arg(long)]
    pub reset_drops_on_dense: bool,
    /// Comparison grid, e.g. `30:1.0,30:0.5,15:1.0`.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<GridPoint>>,
    #[arg(long)]
    pub reference_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub active: Option<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| RasError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    fn apply_common(&mut self, c: &CommonArgs) {
        if let Some(o) = &c.out {
            self.out_dir = o.clone();
        }
        if let Some(s) = c.seed {
            self.seed = s;
        }
    }

    fn apply_sample(&mut self, a: &SampleArgs) {
        self.apply_common(&a.common);
        macro_rules! set {
            ($($field:expr => $value:expr),* $(,)?) => {
                $(if let Some(v) = $value.clone() { $field = v; })*
            };
        }
        set!(
            self.steps => a.steps,
            self.shift => a.shift,
            self.samples => a.samples,
            self.reference_steps => a.reference_steps,
            self.ras.warmup_steps => a.warmup,
            self.ras.dense_reset_steps => a.dense_reset,
            self.ras.average_ratio => a.ratio,
            self.ras.curve => a.curve,
            self.ras.starvation_scale => a.k,
            self.ras.metric => a.metric,
            self.grid => a.grid,
        );
        if a.checkpoint.is_some() {
            self.checkpoint = a.checkpoint.clone();
        }
        if a.class.is_some() {
            self.class_id = a.class;
        }
        self.dense |= a.dense;
        if a.no_recovery {
            self.ras.attention_recovery = false;
        }
        self.ras.reset_drops_on_dense |= a.reset_drops_on_dense;
    }

    /// Merges a parsed command line into this config.
    pub fn apply(&mut self, cmd: &Command) {
        match cmd {
            Command::Train(a) => {
                self.command = "train".into();
                self.apply_common(&a.common);
                if let Some(m) = a.model {
                    self.model = m;
                }
                if let Some(v) = a.train_steps {
                    self.train.steps = v;
                }
                if let Some(v) = a.batch_size {
                    self.train.batch_size = v;
                }
                if let Some(v) = a.lr {
                    self.train.lr = v;
                }
                if let Some(v) = a.warmup_steps {
                    self.train.warmup_steps = v;
                }
                if a.common.seed.is_some() {
                    self.train.seed = self.seed;
                }
            }
            Command::Sample(a) => {
                self.command = "sample".into();
                self.apply_sample(a);
            }
            Command::Compare(a) => {
                self.command = "compare".into();
                self.apply_sample(a);
            }
            Command::Analyze(a) => {
                self.command = "analyze".into();
                self.apply_sample(a);
            }
            Command::Bench(a) => {
                self.command = "bench".into();
                self.apply_common(&a.common);
                if a.checkpoint.is_some() {
                    self.checkpoint = a.checkpoint.clone();
                }
                if let Some(v) = a.rows {
                    self.bench_rows = v;
                }
                if let Some(v) = a.dim {
                    self.bench_dim = v;
                }
                if let Some(v) = a.active {
                    self.bench_active = v;
                }
                if let Some(v) = a.repeats {
                    self.bench_repeats = v;
                }
                if let Some(v) = a.steps {
                    self.steps = v;
                }
            }
        }
    }

    /// Checks everything that can be checked without touching the output
    /// directory.
    pub fn validate(&self) -> Result<()> {
        let needs_model = matches!(self.command.as_str(), "sample" | "compare" | "analyze");
        if needs_model && self.checkpoint.is_none() {
            return Err(RasError::InvalidConfig(format!(
                "{} needs --checkpoint",
                self.command
            )));
        }
        if self.samples == 0 {
            return Err(RasError::InvalidConfig("samples must be positive".into()));
        }
        match self.command.as_str() {
            "train" => {
                self.train.validate()?;
                self.model.config().validate()?;
            }
            "sample" | "analyze" => {
                SigmaSchedule::new(self.steps, self.shift)?;
                if !self.dense {
                    self.ras.schedule(self.steps)?;
                }
            }
            "compare" => {
                SigmaSchedule::new(self.reference_steps, 1.0)?;
                if self.grid.is_empty() {
                    return Err(RasError::InvalidConfig("empty comparison grid".into()));
                }
                for g in &self.grid {
                    self.grid_config(g).ras.schedule(g.steps)?;
                }
            }
            "bench" => {
                if self.bench_rows == 0 || self.bench_dim == 0 || self.bench_repeats == 0 {
                    return Err(RasError::InvalidConfig(
                        "bench sizes must be positive".into(),
                    ));
                }
                if !(self.bench_active > 0.0 && self.bench_active <= 1.0) {
                    return Err(RasError::InvalidConfig(format!(
                        "bench active fraction {} outside (0, 1]",
                        self.bench_active
                    )));
                }
                if self.checkpoint.is_some() {
                    self.ras.schedule(self.steps)?;
                }
            }
            other => {
                return Err(RasError::InvalidConfig(format!(
                    "unknown command {other:?}"
                )));
            }
        }
        Ok(())
    }

    fn grid_config(&self, g: &GridPoint) -> QualityConfig {
        if g.ratio >= 1.0 {
            QualityConfig::dense(g.steps)
        } else {
            QualityConfig::ras(
                g.steps,
                RasConfig {
                    average_ratio: g.ratio,
                    ..self.ras.clone()
                },
            )
        }
    }

    fn seeds(&self) -> Vec<u64> {
        (0..self.samples as u64).map(|i| self.seed + i).collect()
    }

    fn class_for(&self, model: &DitModel, seed: u64) -> Option<usize> {
        match (self.class_id, model.config.num_classes) {
            (Some(c), _) => Some(c),
            (None, 0) => None,
            (None, n) => Some((seed % n as u64) as usize),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| RasError::Serde(e.to_string()))
    }
}

fn load_model(cfg: &RunConfig) -> Result<(DitModel, CheckpointConfig)> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| RasError::InvalidConfig("missing checkpoint".into()))?;
    let ck = checkpoint::load(path)?;
    if let Some(c) = cfg.class_id {
        if c >= ck.model.config.num_classes {
            return Err(RasError::InvalidConfig(format!(
                "class {c} but the model has {} classes",
                ck.model.config.num_classes
            )));
        }
    }
    Ok((ck.model, ck.config))
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir)?;
    export::write_text(dir.join("run_config.toml"), &cfg.to_toml()?)?;
    Ok(dir)
}

/// Runs a parsed and merged config. Returns a one-line summary.
pub fn execute(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    match cfg.command.as_str() {
        "train" => cmd_train(cfg),
        "sample" => cmd_sample(cfg),
        "compare" => cmd_compare(cfg),
        "analyze" => cmd_analyze(cfg),
        "bench" => cmd_bench(cfg),
        other => Err(RasError::InvalidConfig(format!(
            "unknown command {other:?}"
        ))),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let model_cfg = cfg.model.config();
    let model = DitModel::init(&model_cfg, cfg.train.seed)?;
    let dir = prepare_out_dir(cfg)?;
    let dataset = ShapesDataset::new(model_cfg.image_h, cfg.train.seed);
    for kind in ShapeKind::ALL {
        let (img, _) = dataset.sample(kind.class_id() as u64);
        export::write_image(&dir, &format!("preview_{kind:?}").to_lowercase(), &img)?;
    }
    let out = train(model, &dataset, &cfg.train, |_, _| {})?;
    let window = 500.min(out.losses.len().max(1));
    let ma = moving_average(&out.losses, window);
    export::write_text(dir.join("loss.csv"), &export::loss_csv(&out.losses, &ma))?;
    let mut ck = CheckpointConfig::for_model(&model_cfg);
    ck.train = Some(cfg.train.clone());
    ck.final_loss = ma.last().copied();
    checkpoint::save(&out.ema, &ck, dir.join("model.rasf"))?;
    Ok(format!(
        "trained {} steps, final moving-average loss {}",
        out.losses.len(),
        ck.final_loss.map_or("n/a".into(), |l| format!("{l:.5}"))
    ))
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<String> {
    let (model, _) = load_model(cfg)?;
    let sigmas = SigmaSchedule::new(cfg.steps, cfg.shift)?;
    let dir = prepare_out_dir(cfg)?;
    let mut tokens = 0;
    for seed in cfg.seeds() {
        let class = cfg.class_for(&model, seed);
        let img = if cfg.dense {
            sample_dense(&model, &sigmas, seed, class, None)?
        } else {
            let (img, trace) = sample_ras(&model, &sigmas, &cfg.ras, seed, class)?;
            trace.save(dir.join(format!("trace_{seed}.jsonl")))?;
            export::write_text(
                dir.join(format!("timing_{seed}.csv")),
                &export::step_timing_csv(&trace),
            )?;
            tokens += trace.token_forwards();
            img
        };
        export::write_image(&dir, &format!("sample_{seed}"), &img)?;
    }
    Ok(format!(
        "wrote {} sample(s) to {} ({} token forwards)",
        cfg.samples,
        dir.display(),
        tokens
    ))
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<String> {
    let (model, _) = load_model(cfg)?;
    let configs: Vec<QualityConfig> = cfg.grid.iter().map(|g| cfg.grid_config(g)).collect();
    let dir = prepare_out_dir(cfg)?;
    let report = quality_vs_dense(&model, &configs, &cfg.seeds(), cfg.reference_steps, |s| {
        cfg.class_for(&model, s)
    })?;
    export::write_text(dir.join("quality.csv"), &export::quality_csv(&report))?;
    export::write_text(dir.join("timing.csv"), &export::timing_csv(&report))?;
    Ok(format!("compared {} configurations", report.rows.len()))
}

#[derive(Clone, Debug, Serialize)]
struct AnalyzeSummary {
    seed: u64,
    mean_ndcg: f64,
    first_third: f64,
    last_third: f64,
    foreground_mean_active: Option<f64>,
    background_mean_active: Option<f64>,
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<String> {
    let (model, _) = load_model(cfg)?;
    let sigmas = SigmaSchedule::new(cfg.steps, cfg.shift)?;
    let grid = model.config.grid();
    let dir = prepare_out_dir(cfg)?;
    let mut rows = Vec::new();
    for seed in cfg.seeds() {
        let class = cfg.class_for(&model, seed);
        let (img, trace) = sample_ras(&model, &sigmas, &cfg.ras, seed, class)?;
        let curve = continuity_curve(&trace)?;
        let map = drop_count_map(&trace)?;
        let fg = foreground_patches(&img, &grid, FOREGROUND_THRESHOLD)?;
        let split = map.split_means(&fg);
        let (first, last) = thirds(&curve);
        rows.push(AnalyzeSummary {
            seed,
            mean_ndcg: mean_std(&curve.iter().map(|c| c.ndcg).collect::<Vec<_>>()).0,
            first_third: first,
            last_third: last,
            foreground_mean_active: split.map(|s| s.0),
            background_mean_active: split.map(|s| s.1),
        });
        export::write_text(
            dir.join(format!("continuity_{seed}.csv")),
            &export::continuity_csv(&curve),
        )?;
        export::write_text(
            dir.join(format!("activation_{seed}.csv")),
            &export::activation_csv(&map),
        )?;
        export::write_heatmap(&dir, &format!("activation_{seed}"), &map, 8)?;
        export::write_image(&dir, &format!("sample_{seed}"), &img)?;
        trace.save(dir.join(format!("trace_{seed}.jsonl")))?;
        export::write_text(
            dir.join(format!("timing_{seed}.csv")),
            &export::step_timing_csv(&trace),
        )?;
    }
    let (base_mean, base_std) = random_ndcg_baseline(grid.num_patches(), 10_000, cfg.seed);
    let summary = serde_json::json!({
        "ndcg_convention": "linear gains rel = P - rank, log2 discount",
        "random_baseline": { "mean": base_mean, "std": base_std, "samples": 10_000 },
        "runs": rows,
    });
    let text =
        serde_json::to_string_pretty(&summary).map_err(|e| RasError::Serde(e.to_string()))?;
    export::write_text(dir.join("summary.json"), &text)?;
    Ok(format!("analyzed {} run(s)", rows.len()))
}

fn time_best<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

/// Random matrix from a seeded generator.
fn bench_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let img = crate::image::Image::standard_normal(1, rows, cols, seed);
    Matrix::from_vec(rows, cols, img.data().to_vec()).expect("sized")
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<String> {
    let model = match &cfg.checkpoint {
        Some(_) => Some(load_model(cfg)?.0),
        None => None,
    };
    let dir = prepare_out_dir(cfg)?;
    let (m, d) = (cfg.bench_rows, cfg.bench_dim);
    let x = bench_matrix(m, d, cfg.seed);
    let w = bench_matrix(d, d, cfg.seed + 1);
    let n_active = ((m as f64 * cfg.bench_active).ceil() as usize).clamp(1, m);
    let stride = m as f64 / n_active as f64;
    let idx: Vec<usize> = (0..n_active)
        .map(|i| (i as f64 * stride) as usize)
        .collect();
    let active = IndexSet::new(idx, m)?;
    let x_active = x.select_rows(active.indices())?;
    let mut dest = Matrix::zeros(m, d);
    let r = cfg.bench_repeats;
    let dense_ms = time_best(r, || gemm(&x, &w, None))?;
    let gather_ms = time_best(r, || gather_gemm(&x, &active, &w))?;
    let scatter_ms = time_best(r, || gemm_scatter(&x_active, &w, &active, &mut dest))?;
    let mut csv = String::from("kernel,rows,dim,active_rows,best_ms,ratio_to_dense\n");
    for (name, ms) in [
        ("dense_gemm", dense_ms),
        ("gather_gemm", gather_ms),
        ("gemm_scatter", scatter_ms),
    ] {
        let rows = if name == "dense_gemm" { m } else { n_active };
        csv.push_str(&format!(
            "{name},{m},{d},{rows},{ms:.3},{:.4}\n",
            ms / dense_ms
        ));
    }
    if let Some(model) = &model {
        let sigmas = SigmaSchedule::new(cfg.steps, cfg.shift)?;
        let class = cfg.class_for(model, cfg.seed);
        let dense = time_best(r, || sample_dense(model, &sigmas, cfg.seed, class, None))?;
        let ras = time_best(r, || sample_ras(model, &sigmas, &cfg.ras, cfg.seed, class))?;
        csv.push_str(&format!(
            "sample_dense,{},{},{},{dense:.3},1.0000\n",
            cfg.steps,
            model.config.hidden_dim,
            model.config.num_patches()
        ));
        csv.push_str(&format!(
            "sample_ras@{},{},{},{},{ras:.3},{:.4}\n",
            cfg.ras.average_ratio,
            cfg.steps,
            model.config.hidden_dim,
            model.config.num_patches(),
            ras / dense
        ));
    }
    export::write_text(dir.join("bench.csv"), &csv)?;
    Ok(format!(
        "gather {:.3}x, scatter {:.3}x of dense at {m}x{d} with {n_active} active rows",
        gather_ms / dense_ms,
        scatter_ms / dense_ms
    ))
}

/// JSON error record printed as the last line of a failed run.
pub fn error_line(e: &RasError) -> String {
    serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| RasError::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RasError::InvalidConfig(e.to_string()))?;
    }
    Ok(())
}

/// Parses, merges and runs; returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let result = configure_threads().and_then(|_| {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&cli.command);
        execute(&cfg)
    });
    match result {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> RunConfig {
        let cli = Cli::try_parse_from(args).unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply(&cli.command);
        cfg
    }

    #[test]
    fn flags_override_defaults() {
        let cfg = parse(&[
            "ras",
            "sample",
            "--checkpoint",
            "m.rasf",
            "--steps",
            "20",
            "--dense-reset",
            "8,12",
            "--ratio",
            "0.25",
            "--metric",
            "l2norm",
            "--no-recovery",
        ]);
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.ras.dense_reset_steps, vec![8, 12]);
        assert_eq!(cfg.ras.average_ratio, 0.25);
        assert_eq!(cfg.ras.metric, MetricKind::L2norm);
        assert!(!cfg.ras.attention_recovery);
        cfg.validate().unwrap();
    }

    #[test]
    fn grid_flag_parses() {
        let cfg = parse(&[
            "ras",
            "compare",
            "--checkpoint",
            "m",
            "--grid",
            "30:1.0,20:0.5",
        ]);
        assert_eq!(
            cfg.grid,
            vec![
                GridPoint {
                    steps: 30,
                    ratio: 1.0
                },
                GridPoint {
                    steps: 20,
                    ratio: 0.5
                }
            ]
        );
    }

    #[test]
    fn reset_inside_warmup_rejected() {
        let cfg = parse(&["ras", "sample", "--checkpoint", "m", "--dense-reset", "2"]);
        assert_eq!(cfg.validate().unwrap_err().kind(), "invalid_config");
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = parse(&["ras", "analyze", "--checkpoint", "m", "--class", "2"]);
        let text = cfg.to_toml().unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
