//! Error against a dense 30-step reference for several sampling ratios,
//! with the dense 15-step sampler as the equal-cost alternative.

use ras_core::analysis::{quality_vs_dense, QualityConfig};
use ras_core::checkpoint;
use ras_core::RasConfig;

const MODEL: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/toy_model.rasf");

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let model = checkpoint::load(MODEL)?.model;
    let mut configs = vec![QualityConfig::dense(15)];
    for ratio in [0.75, 0.5, 0.3] {
        configs.push(QualityConfig::ras(
            30,
            RasConfig {
                average_ratio: ratio,
                ..RasConfig::default()
            },
        ));
    }
    let seeds: Vec<u64> = (0..8).collect();
    let classes = model.config.num_classes as u64;
    let report = quality_vs_dense(&model, &configs, &seeds, 30, |s| {
        Some((s % classes) as usize)
    })?;
    println!(
        "{:<12} {:>10} {:>8} {:>14}",
        "config", "mean mse", "psnr", "token flops"
    );
    for r in &report.rows {
        println!(
            "{:<12} {:>10.2e} {:>8.2} {:>14}",
            r.label, r.mean_mse, r.mean_psnr, r.flops.token_linear
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
