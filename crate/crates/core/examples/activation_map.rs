//! How often each patch was recomputed during a run, printed as a grid
//! next to the generated shape.

use ras_core::analysis::{drop_count_map, foreground_patches, FOREGROUND_THRESHOLD};
use ras_core::checkpoint;
use ras_core::export::{write_heatmap, write_image};
use ras_core::{sample_ras, RasConfig, SigmaSchedule};

const MODEL: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/toy_model.rasf");

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let model = checkpoint::load(MODEL)?.model;
    let grid = model.config.grid();
    let sigmas = SigmaSchedule::new(30, 1.0)?;
    let (img, trace) = sample_ras(&model, &sigmas, &RasConfig::default(), 9, Some(1))?;
    let map = drop_count_map(&trace)?;
    let fg = foreground_patches(&img, &grid, FOREGROUND_THRESHOLD)?;

    for r in 0..map.grid_h {
        let counts: String = (0..map.grid_w)
            .map(|c| format!("{:3}", map.get(r, c)))
            .collect();
        let shape: String = (0..map.grid_w)
            .map(|c| if fg[r * map.grid_w + c] { '#' } else { '.' })
            .collect();
        println!("{counts}   {shape}");
    }
    if let Some((f, b)) = map.split_means(&fg) {
        println!("mean active steps: foreground {f:.1}, background {b:.1}");
    }
    let dir = std::env::temp_dir().join("ras_activation");
    std::fs::create_dir_all(&dir)?;
    write_heatmap(&dir, "activation", &map, 8)?;
    write_image(&dir, "sample", &img)?;
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
