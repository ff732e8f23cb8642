//! One selective forward pass with attention recovery.
//!
//! A dense pass fills the key/value cache. A later pass over a quarter of
//! the patches rewrites only those cache rows, and its queries still attend
//! to every patch through the cached entries.

use ras_core::dit::FlopCounter;
use ras_core::tensor::IndexSet;
use ras_core::{DitModel, Image, ModelConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig::small();
    let model = DitModel::random(&cfg, 3, 0.1)?;
    let p = cfg.num_patches();
    let x = Image::standard_normal(cfg.channels, cfg.image_h, cfg.image_w, 0);

    let mut cache = model.new_cache();
    let mut dense_flops = FlopCounter::default();
    let all = model.patchify(&x, &IndexSet::full(p), Some(&mut dense_flops))?;
    model.forward(&all, 0.8, Some(1), &mut cache, true, Some(&mut dense_flops))?;
    let before = cache.clone();

    let active = IndexSet::new((0..p).step_by(4).collect(), p)?;
    let mut flops = FlopCounter::default();
    let tokens = model.patchify(&x, &active, Some(&mut flops))?;
    let out = model.forward(&tokens, 0.7, Some(1), &mut cache, true, Some(&mut flops))?;

    let rewritten = (0..p)
        .filter(|&r| cache.layers[0].k.row(r) != before.layers[0].k.row(r))
        .count();
    println!(
        "{} active tokens -> output {}x{}, {rewritten} cache rows rewritten",
        active.len(),
        out.rows(),
        out.cols()
    );
    println!(
        "token-linear FLOPs {} vs dense {} ({:.2}x)",
        flops.token_linear,
        dense_flops.token_linear,
        flops.token_linear as f64 / dense_flops.token_linear as f64
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
