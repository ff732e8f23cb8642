//! Adjacent-step NDCG of the patch rankings during one sampling run,
//! against the expectation for unrelated random rankings.

use ras_core::analysis::{continuity_curve, random_ndcg_expectation, thirds};
use ras_core::checkpoint;
use ras_core::{sample_ras, RasConfig, SigmaSchedule};

const MODEL: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/toy_model.rasf");

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let model = checkpoint::load(MODEL)?.model;
    let sigmas = SigmaSchedule::new(30, 1.0)?;
    let (_, trace) = sample_ras(&model, &sigmas, &RasConfig::default(), 2, Some(0))?;
    let curve = continuity_curve(&trace)?;
    for c in &curve {
        let bar = "#".repeat((c.ndcg * 40.0) as usize);
        println!("{:2} {:.3} {bar}", c.step, c.ndcg);
    }
    let (first, last) = thirds(&curve);
    println!(
        "random baseline {:.3}; first third {first:.3}, last third {last:.3}",
        random_ndcg_expectation(model.config.num_patches())
    );
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
