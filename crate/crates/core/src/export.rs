//! Image and table writers.

use std::io::Write;
use std::path::Path;

use crate::analysis::{ActivationMap, ContinuityPoint, QualityReport};
use crate::error::{RasError, Result};
use crate::image::Image;
use crate::trace::RunTrace;

/// Maps `[−1, 1]` to bytes, clamping. Multi-channel images are averaged.
pub fn to_gray_bytes(image: &Image) -> Vec<u8> {
    let (c, h, w) = image.shape();
    (0..h * w)
        .map(|i| {
            let v = (0..c).map(|ch| image.data()[ch * h * w + i]).sum::<f32>() / c as f32;
            (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Binary 8-bit PGM.
pub fn pgm_bytes(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    if gray.len() != width * height {
        return Err(RasError::shape(
            "pgm",
            format!("{} bytes for {width}x{height}", gray.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    std::fs::write(path, pgm_bytes(width, height, gray)?)?;
    Ok(())
}

pub fn write_png(path: impl AsRef<Path>, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, gray.to_vec()).ok_or_else(
        || RasError::shape("png", format!("{} bytes for {width}x{height}", gray.len())),
    )?;
    img.save(path).map_err(|e| RasError::Serde(e.to_string()))
}

/// Writes `<stem>.pgm` and `<stem>.png` for an image.
pub fn write_image(dir: impl AsRef<Path>, stem: &str, image: &Image) -> Result<()> {
    let gray = to_gray_bytes(image);
    let dir = dir.as_ref();
    write_pgm(
        dir.join(format!("{stem}.pgm")),
        image.width(),
        image.height(),
        &gray,
    )?;
    write_png(
        dir.join(format!("{stem}.png")),
        image.width(),
        image.height(),
        &gray,
    )
}

/// Heatmap with each patch blown up to `scale × scale` pixels.
pub fn write_heatmap(
    dir: impl AsRef<Path>,
    stem: &str,
    map: &ActivationMap,
    scale: usize,
) -> Result<()> {
    let s = scale.max(1);
    let cells = map.heatmap();
    let (w, h) = (map.grid_w * s, map.grid_h * s);
    let gray: Vec<u8> = (0..h * w)
        .map(|i| cells[(i / w / s) * map.grid_w + (i % w) / s])
        .collect();
    let dir = dir.as_ref();
    write_pgm(dir.join(format!("{stem}.pgm")), w, h, &gray)?;
    write_png(dir.join(format!("{stem}.png")), w, h, &gray)
}

/// Shortest round-trip form, so CSV values reproduce bit-for-bit.
fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:?}")
    }
}

pub fn loss_csv(losses: &[f64], moving_average: &[f64]) -> String {
    let mut s = String::from("step,loss,moving_average\n");
    for (i, (l, m)) in losses.iter().zip(moving_average).enumerate() {
        s.push_str(&format!("{i},{},{}\n", num(*l), num(*m)));
    }
    s
}

pub fn continuity_csv(curve: &[ContinuityPoint]) -> String {
    let mut s = String::from("# ndcg gains: linear rel = P - rank, log2 discount\nstep,ndcg\n");
    for c in curve {
        s.push_str(&format!("{},{}\n", c.step, num(c.ndcg)));
    }
    s
}

pub fn activation_csv(map: &ActivationMap) -> String {
    let mut s = String::from("patch,row,col,active_steps\n");
    for (p, c) in map.counts.iter().enumerate() {
        s.push_str(&format!("{p},{},{},{c}\n", p / map.grid_w, p % map.grid_w));
    }
    s
}

pub fn quality_csv(report: &QualityReport) -> String {
    let mut s = String::from(
        "label,steps,average_ratio,mean_mse,mean_psnr,token_linear_flops,attention_flops,\
         total_flops,analytic_token_linear_flops,analytic_total_flops\n",
    );
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.steps,
            num(r.average_ratio),
            num(r.mean_mse),
            num(r.mean_psnr),
            r.flops.token_linear,
            r.flops.attention,
            r.flops.total(),
            r.analytic_flops.token_linear,
            r.analytic_flops.total(),
        ));
    }
    s
}

/// Wall-clock columns, kept apart from the deterministic report.
pub fn timing_csv(report: &QualityReport) -> String {
    let mut s = String::from("label,seeds,wall_ms\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{:.3}\n",
            r.label,
            report.seeds.len(),
            r.wall_ms
        ));
    }
    s
}

/// Per-step wall-clock times of one sampling run.
pub fn step_timing_csv(trace: &RunTrace) -> String {
    let mut s = String::from("step,active,wall_us\n");
    for r in &trace.steps {
        s.push_str(&format!("{},{},{}\n", r.step, r.active.len(), r.wall_us));
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_mapping() {
        let img = Image::from_vec(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let gray = to_gray_bytes(&img);
        assert_eq!(gray, vec![0, 128, 255]);
        let bytes = pgm_bytes(3, 1, &gray).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert!(pgm_bytes(2, 2, &gray).is_err());
    }

    #[test]
    fn numbers_roundtrip() {
        let v = 0.1 + 0.2;
        assert_eq!(num(v).parse::<f64>().unwrap(), v);
        assert_eq!(num(f64::INFINITY), "inf");
    }
}
