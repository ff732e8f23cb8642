//! Finite-difference gradient checks shared by the test targets.
#![allow(dead_code)]

use ras_core::tensor::Matrix;
use ras_core::training::{example_loss, FlowExample};
use ras_core::{DitModel, Image, ModelConfig};

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-2;

pub fn example(cfg: &ModelConfig, seed: u64, sigma: f32, class_id: Option<usize>) -> FlowExample {
    FlowExample {
        x0: Image::standard_normal(cfg.channels, cfg.image_h, cfg.image_w, seed),
        x1: Image::standard_normal(cfg.channels, cfg.image_h, cfg.image_w, seed + 1000),
        sigma,
        class_id,
    }
}

/// Norm-relative error between analytic and numeric gradients, per tensor.
pub fn group_errors(model: &DitModel, ex: &FlowExample) -> Vec<(String, f64, f64)> {
    let mut grads = model.zeros_like();
    example_loss(model, ex, Some((&mut grads, 1.0))).unwrap();
    let analytic: Vec<(String, Vec<f32>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let mut out = Vec::new();
    let mut probe = model.clone();
    for (gi, (name, an)) in analytic.iter().enumerate() {
        let mut diff2 = 0.0f64;
        let mut norm_an = 0.0f64;
        let mut norm_fd = 0.0f64;
        for j in 0..an.len() {
            let orig = probe.tensors_mut()[gi].1.data()[j];
            probe.tensors_mut()[gi].1.data_mut()[j] = orig + STEP;
            let up = example_loss(&probe, ex, None).unwrap();
            probe.tensors_mut()[gi].1.data_mut()[j] = orig - STEP;
            let down = example_loss(&probe, ex, None).unwrap();
            probe.tensors_mut()[gi].1.data_mut()[j] = orig;
            let h = ((orig + STEP) as f64) - ((orig - STEP) as f64);
            let fd = (up - down) / h;
            let a = an[j] as f64;
            diff2 += (fd - a) * (fd - a);
            norm_an += a * a;
            norm_fd += fd * fd;
        }
        let scale = norm_an.sqrt().max(norm_fd.sqrt());
        let rel = if scale == 0.0 {
            0.0
        } else {
            diff2.sqrt() / scale
        };
        out.push((name.clone(), rel, norm_an.sqrt()));
    }
    out
}

/// Random weights with the attention path strengthened: sharper scores
/// from larger query/key projections, larger value/output projections and
/// a weaker direct patch path. At random init the query/key gradients are
/// otherwise so small that f32 rounding in the differenced loss (about
/// 3e-8 relative) swamps them at this step size.
pub fn test_model(cfg: &ModelConfig, seed: u64) -> DitModel {
    let mut m = DitModel::random(cfg, seed, 0.15).unwrap();
    let scale = |w: &mut Matrix, s: f32| w.data_mut().iter_mut().for_each(|v| *v *= s);
    for b in &mut m.blocks {
        scale(&mut b.wq, 3.0);
        scale(&mut b.wk, 3.0);
        scale(&mut b.wv, 3.0);
        scale(&mut b.wo, 3.0);
    }
    scale(&mut m.patch_w, 0.3);
    m
}

/// Directional derivative along the normalized analytic gradient of each
/// group. The whole group moves at once, so the difference quotient is
/// far above rounding and must equal the gradient norm.
pub fn directional_errors(model: &DitModel, ex: &FlowExample) -> Vec<(String, f64)> {
    let mut grads = model.zeros_like();
    example_loss(model, ex, Some((&mut grads, 1.0))).unwrap();
    let mut out = Vec::new();
    for (gi, (name, g)) in grads.tensors().into_iter().enumerate() {
        let norm = g
            .data()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let dir: Vec<f32> = g.data().iter().map(|&v| (v as f64 / norm) as f32).collect();
        let shifted = |sign: f32| {
            let mut m = model.clone();
            for (w, d) in m.tensors_mut()[gi].1.data_mut().iter_mut().zip(&dir) {
                *w += sign * STEP * d;
            }
            example_loss(&m, ex, None).unwrap()
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * STEP as f64);
        out.push((name, (fd - norm).abs() / norm));
    }
    out
}
