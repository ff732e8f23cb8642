//! Samples the bundled model with and without region-adaptive sampling and
//! writes both images next to each other in a temporary directory.

use ras_core::checkpoint;
use ras_core::dit::FlopCounter;
use ras_core::export::write_image;
use ras_core::{sample_dense, sample_ras, RasConfig, SigmaSchedule};

const MODEL: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/toy_model.rasf");

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let model = checkpoint::load(MODEL)?.model;
    let sigmas = SigmaSchedule::new(30, 1.0)?;
    let (seed, class) = (5, Some(1));

    let mut dense_flops = FlopCounter::default();
    let dense = sample_dense(&model, &sigmas, seed, class, Some(&mut dense_flops))?;
    let (img, trace) = sample_ras(&model, &sigmas, &RasConfig::default(), seed, class)?;

    let dir = std::env::temp_dir().join("ras_sample");
    std::fs::create_dir_all(&dir)?;
    write_image(&dir, "dense", &dense)?;
    write_image(&dir, "ras", &img)?;
    let flops = trace.total_flops();
    println!(
        "MSE to dense {:.2e}, token-linear FLOPs {:.2}x of dense, images in {}",
        img.mse(&dense),
        flops.token_linear as f64 / dense_flops.token_linear as f64,
        dir.display()
    );
    for s in trace.steps.iter().take(8) {
        println!(
            "step {:2} sigma {:.3} active {:2}{}",
            s.step,
            s.sigma,
            s.active.len(),
            if s.dense { " (dense)" } else { "" }
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
