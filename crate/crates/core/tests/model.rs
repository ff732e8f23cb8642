//! Selective forward, KV-cache recovery and FLOP accounting of the toy DiT.

use ras_core::dit::{analytic_forward_flops, attention, unpatchify, FlopCounter};
use ras_core::tensor::{IndexSet, Matrix};
use ras_core::{DitModel, Image, ModelConfig, RasError};

fn model() -> DitModel {
    DitModel::random(&ModelConfig::tiny(), 11, 0.2).unwrap()
}

fn input(cfg: &ModelConfig, seed: u64) -> Image {
    Image::standard_normal(cfg.channels, cfg.image_h, cfg.image_w, seed)
}

fn rows_of_dense(model: &DitModel, dense: &Image, indices: &[usize]) -> Matrix {
    let grid = model.config.grid();
    let mut out = Matrix::zeros(indices.len(), grid.patch_dim());
    for (i, &p) in indices.iter().enumerate() {
        grid.read_patch(dense, p, out.row_mut(i));
    }
    out
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum();
    let den: f64 = b.data().iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den.max(1e-30)).sqrt()
}

#[test]
fn full_set_forward_is_the_dense_forward() {
    let m = model();
    let x = input(&m.config, 1);
    let all = IndexSet::full(m.config.num_patches());
    let tokens = m.patchify(&x, &all, None).unwrap();
    for recovery in [false, true] {
        let mut cache = m.new_cache();
        let out = m
            .forward(&tokens, 0.7, Some(2), &mut cache, recovery, None)
            .unwrap();
        assert!(cache.is_valid());
        let dense = m.forward_dense(&x, 0.7, Some(2), None).unwrap();
        let expect = rows_of_dense(&m, &dense, all.indices());
        assert_eq!(out, expect, "recovery={recovery}");
    }
}

#[test]
fn selective_forward_is_permutation_equivariant() {
    let m = model();
    let x = input(&m.config, 2);
    let active = IndexSet::new(vec![0, 3, 5, 9, 14], m.config.num_patches()).unwrap();
    let tokens = m.patchify(&x, &active, None).unwrap();
    let mut cache = m.new_cache();
    let base = m
        .forward(&tokens, 0.4, None, &mut cache, false, None)
        .unwrap();

    let perm = [3usize, 0, 4, 1, 2];
    let idx: Vec<usize> = perm.iter().map(|&i| active.indices()[i]).collect();
    let permuted = tokens.tokens.select_rows(&perm).unwrap();
    let mut cache2 = m.new_cache();
    let out = m
        .forward_indices(&permuted, &idx, 0.4, None, &mut cache2, false, None)
        .unwrap();
    let expect = base.select_rows(&perm).unwrap();
    assert!(rel_err(&out, &expect) < 1e-6);
}

#[test]
fn recovery_from_a_fresh_cache_reproduces_dense_rows() {
    // When the cache was filled from the same input at the same noise level,
    // the cached keys and values of inactive tokens are exactly what a dense
    // forward would compute, so a selective forward must agree with it.
    let m = model();
    let x = input(&m.config, 3);
    let p = m.config.num_patches();
    let mut cache = m.new_cache();
    let all = IndexSet::full(p);
    m.forward(
        &m.patchify(&x, &all, None).unwrap(),
        0.5,
        Some(1),
        &mut cache,
        true,
        None,
    )
    .unwrap();
    let active = IndexSet::new(vec![1, 2, 7, 8, 15], p).unwrap();
    let out = m
        .forward(
            &m.patchify(&x, &active, None).unwrap(),
            0.5,
            Some(1),
            &mut cache,
            true,
            None,
        )
        .unwrap();
    let dense = m.forward_dense(&x, 0.5, Some(1), None).unwrap();
    assert!(rel_err(&out, &rows_of_dense(&m, &dense, active.indices())) < 1e-6);
}

#[test]
fn recovery_uses_stale_rows_and_differs_from_dense() {
    let m = model();
    let p = m.config.num_patches();
    let mut cache = m.new_cache();
    let all = IndexSet::full(p);
    let old = input(&m.config, 4);
    m.forward(
        &m.patchify(&old, &all, None).unwrap(),
        0.9,
        None,
        &mut cache,
        true,
        None,
    )
    .unwrap();
    let snapshot = cache.clone();
    let x = input(&m.config, 5);
    let active = IndexSet::new(vec![0, 6, 10], p).unwrap();
    m.forward(
        &m.patchify(&x, &active, None).unwrap(),
        0.5,
        None,
        &mut cache,
        true,
        None,
    )
    .unwrap();
    for (before, after) in snapshot.layers.iter().zip(&cache.layers) {
        for r in 0..p {
            let touched = active.indices().contains(&r);
            assert_eq!(before.k.row(r) != after.k.row(r), touched, "row {r}");
            assert_eq!(before.v.row(r) != after.v.row(r), touched, "row {r}");
        }
    }
}

#[test]
fn selective_recovery_needs_a_valid_cache() {
    let m = model();
    let x = input(&m.config, 6);
    let p = m.config.num_patches();
    let active = IndexSet::new(vec![1, 2], p).unwrap();
    let tokens = m.patchify(&x, &active, None).unwrap();
    let mut cache = m.new_cache();
    let err = m
        .forward(&tokens, 0.5, None, &mut cache, true, None)
        .unwrap_err();
    assert!(matches!(err, RasError::CacheInvalid));
    // Without recovery the cache is not read, so it may be empty.
    m.forward(&tokens, 0.5, None, &mut cache, false, None)
        .unwrap();

    let all = IndexSet::full(p);
    m.forward(
        &m.patchify(&x, &all, None).unwrap(),
        0.5,
        None,
        &mut cache,
        true,
        None,
    )
    .unwrap();
    m.forward(&tokens, 0.5, None, &mut cache, true, None)
        .unwrap();
    cache.invalidate();
    assert!(matches!(
        m.forward(&tokens, 0.5, None, &mut cache, true, None),
        Err(RasError::CacheInvalid)
    ));
}

#[test]
fn forward_rejects_bad_indices() {
    let m = model();
    let x = input(&m.config, 7);
    let active = IndexSet::new(vec![1, 2], m.config.num_patches()).unwrap();
    let tokens = m.patchify(&x, &active, None).unwrap();
    let mut cache = m.new_cache();
    assert!(m
        .forward_indices(&tokens.tokens, &[1, 1], 0.5, None, &mut cache, false, None)
        .is_err());
    assert!(m
        .forward_indices(&tokens.tokens, &[1, 99], 0.5, None, &mut cache, false, None)
        .is_err());
    assert!(m
        .forward_indices(&tokens.tokens, &[1], 0.5, None, &mut cache, false, None)
        .is_err());
}

#[test]
fn singleton_attention_returns_its_value() {
    let q = Matrix::from_rows(&[vec![0.3, -1.0, 2.0, 0.5], vec![4.0, 1.0, -3.0, 0.0]]).unwrap();
    let k = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
    let v = Matrix::from_rows(&[vec![-0.5, 0.25, 7.0, 1.5]]).unwrap();
    let out = attention(&q, &k, &v, 2).unwrap();
    for r in 0..2 {
        assert_eq!(out.row(r), v.row(0));
    }
    assert!(attention(&q, &k, &v, 3).is_err());
    assert!(attention(&q, &Matrix::zeros(0, 4), &Matrix::zeros(0, 4), 2).is_err());
}

#[test]
fn flop_counter_matches_closed_form() {
    let m = model();
    let cfg = m.config.clone();
    let p = cfg.num_patches();
    let x = input(&cfg, 8);

    let mut dense = FlopCounter::default();
    m.forward_dense(&x, 0.5, Some(0), Some(&mut dense)).unwrap();
    assert_eq!(dense, analytic_forward_flops(&cfg, p, p));

    let active = IndexSet::new(vec![0, 1, 2, 3, 4], p).unwrap();
    let mut cache = m.new_cache();
    m.forward(
        &m.patchify(&x, &IndexSet::full(p), None).unwrap(),
        0.5,
        Some(0),
        &mut cache,
        true,
        None,
    )
    .unwrap();
    for (recovery, keys) in [(true, p), (false, active.len())] {
        let mut f = FlopCounter::default();
        let tokens = m.patchify(&x, &active, Some(&mut f)).unwrap();
        m.forward(&tokens, 0.5, Some(0), &mut cache, recovery, Some(&mut f))
            .unwrap();
        assert_eq!(f, analytic_forward_flops(&cfg, active.len(), keys));
    }
}

#[test]
fn patchify_embeds_the_requested_patch() {
    let cfg = ModelConfig {
        image_h: 8,
        image_w: 8,
        patch_size: 4,
        ..ModelConfig::tiny()
    };
    let m = DitModel::random(&cfg, 2, 0.3).unwrap();
    let x = input(&cfg, 9);
    let one = m
        .patchify(&x, &IndexSet::new(vec![3], 4).unwrap(), None)
        .unwrap();
    assert_eq!(one.positions, vec![(1, 1)]);

    // Bottom-right 4x4 block, gathered by hand.
    let mut pixels = Vec::new();
    for y in 4..8 {
        for xx in 4..8 {
            pixels.push(x.get(0, y, xx));
        }
    }
    let mut expect: Vec<f32> = m.patch_b.data().to_vec();
    for (i, px) in pixels.iter().enumerate() {
        for (j, e) in expect.iter_mut().enumerate() {
            *e += px * m.patch_w.get(i, j);
        }
    }
    let got = one.tokens.row(0);
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() <= 1e-5 * e.abs().max(1.0));
    }

    let all = m.patchify(&x, &IndexSet::full(4), None).unwrap();
    assert_eq!(all.tokens.row(3), got);
    assert!(m
        .patchify(&Image::zeros(1, 8, 4), &IndexSet::full(4), None)
        .is_err());
}

#[test]
fn zero_image_embeds_to_the_bias() {
    let m = model();
    let p = m.config.num_patches();
    let zero = Image::zeros(1, m.config.image_h, m.config.image_w);
    let t = m.patchify(&zero, &IndexSet::full(p), None).unwrap();
    assert_eq!(t.tokens.rows(), p);
    for r in 0..p {
        assert_eq!(t.tokens.row(r), m.patch_b.data());
    }
}

#[test]
fn unpatchify_touches_only_active_patches() {
    let cfg = ModelConfig::tiny();
    let grid = cfg.grid();
    let active = IndexSet::new(vec![0, 5], grid.num_patches()).unwrap();
    let tokens = Matrix::filled(2, grid.patch_dim(), 1.0);
    let mut dest = Image::filled(1, 8, 8, -1.0);
    unpatchify(&grid, &tokens, &active, &mut dest).unwrap();
    let changed = dest.data().iter().filter(|&&v| v != -1.0).count();
    assert_eq!(changed, 2 * grid.patch_dim());
    assert_eq!(dest.get(0, 0, 0), 1.0);
    assert_eq!(dest.get(0, 2, 2), 1.0);
    assert_eq!(dest.get(0, 0, 2), -1.0);

    let before = dest.clone();
    unpatchify(
        &grid,
        &Matrix::zeros(0, grid.patch_dim()),
        &IndexSet::empty(grid.num_patches()),
        &mut dest,
    )
    .unwrap();
    assert_eq!(dest, before);
    assert!(unpatchify(
        &grid,
        &tokens,
        &IndexSet::new(vec![0], 16).unwrap(),
        &mut dest
    )
    .is_err());
}
