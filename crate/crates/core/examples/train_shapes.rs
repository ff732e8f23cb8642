//! Trains a small model on the procedural shapes for a few steps and
//! writes a checkpoint and the loss curve to a temporary directory.
//!
//! `cargo run --release --example train_shapes -- 200` trains longer.

use ras_core::checkpoint::{self, CheckpointConfig};
use ras_core::training::{train, ShapesDataset, TrainConfig};
use ras_core::{DitModel, ModelConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let model_cfg = ModelConfig::tiny();
    let train_cfg = TrainConfig {
        steps,
        batch_size: 8,
        warmup_steps: 10,
        seed: 1,
        ..TrainConfig::default()
    };
    let dataset = ShapesDataset::new(model_cfg.image_h, train_cfg.seed);
    let start = std::time::Instant::now();
    let out = train(
        DitModel::init(&model_cfg, 1)?,
        &dataset,
        &train_cfg,
        |step, loss| {
            if step % 10 == 0 {
                println!("step {step:5}  loss {loss:.4}");
            }
        },
    )?;
    println!(
        "{} steps in {:.2?}, final 10-step average loss {:.4}",
        steps,
        start.elapsed(),
        out.final_moving_average(10).unwrap_or(f64::NAN)
    );

    let dir = std::env::temp_dir().join("ras_train_shapes");
    std::fs::create_dir_all(&dir)?;
    let mut ckpt_cfg = CheckpointConfig::for_model(&model_cfg);
    ckpt_cfg.train = Some(train_cfg);
    ckpt_cfg.final_loss = out.final_moving_average(10);
    let path = dir.join("model.rasf");
    checkpoint::save(&out.ema, &ckpt_cfg, &path)?;
    let loaded = checkpoint::load(&path)?;
    assert_eq!(loaded.model, out.ema);
    println!("checkpoint written to {}", path.display());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
