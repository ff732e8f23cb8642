//! Gather-prologue and scatter-epilogue GeMM against their unfused forms.

use std::time::Instant;

use ras_core::tensor::{gather_gemm, gemm, gemm_scatter, IndexSet, Matrix};
use ras_core::Image;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let img = Image::standard_normal(1, rows, cols, seed);
    Matrix::from_vec(rows, cols, img.data().to_vec()).expect("sized")
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let (rows, dim) = (1024, 256);
    let x = random(rows, dim, 1);
    let w = random(dim, dim, 2);
    let active = IndexSet::new((0..rows).filter(|r| r % 4 == 1).collect(), rows)?;

    let fused = gather_gemm(&x, &active, &w)?;
    let unfused = gemm(&x.select_rows(active.indices())?, &w, None)?;
    assert_eq!(fused, unfused);

    // Scatter writes only the active rows of the full-length buffer.
    let mut cache = Matrix::filled(rows, dim, 9.0);
    gemm_scatter(&fused, &w, &active, &mut cache)?;
    let untouched = (0..rows)
        .filter(|r| !active.indices().contains(r))
        .all(|r| cache.row(r).iter().all(|&v| v == 9.0));
    assert!(untouched);

    let time = |f: &mut dyn FnMut()| {
        let t = Instant::now();
        f();
        t.elapsed()
    };
    let dense = time(&mut || drop(gemm(&x, &w, None)));
    let sparse = time(&mut || drop(gather_gemm(&x, &active, &w)));
    println!(
        "{} of {rows} rows active: dense {dense:.2?}, gather {sparse:.2?}",
        active.len()
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
