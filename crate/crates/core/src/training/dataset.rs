//! Procedural single-shape images.
//!
//! Sample `i` of a dataset depends only on `(seed, i)`: its parameters come
//! from a ChaCha8 stream seeded with `seed` on stream `i`, drawn in a fixed
//! order. Rasterization averages a 4×4 grid of sub-pixel coverage tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
    ];

    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn from_class(class_id: usize) -> Option<Self> {
        Self::ALL.get(class_id).copied()
    }

    /// Whether the point lies inside a shape of radius `r` centered at the
    /// origin.
    fn contains(self, x: f64, y: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => x * x + y * y <= r * r,
            ShapeKind::Square => {
                let h = r * 0.85;
                x.abs() <= h && y.abs() <= h
            }
            ShapeKind::Triangle => {
                // Upward triangle inscribed in the circle of radius r.
                let top = -r;
                let base = r * 0.5;
                if y < top || y > base {
                    return false;
                }
                let half_width = (y - top) / (base - top) * r * 3f64.sqrt() / 2.0;
                x.abs() <= half_width
            }
            ShapeKind::Ring => {
                let d2 = x * x + y * y;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    /// Center in pixel units.
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// Foreground value in `[0.5, 1]`.
    pub intensity: f64,
}

const SUPERSAMPLE: usize = 4;

impl ShapeParams {
    /// Coverage-weighted rendering in `[0, 1]`.
    pub fn render(&self, size: usize) -> Vec<f64> {
        let mut out = vec![0.0; size * size];
        let n = SUPERSAMPLE;
        for py in 0..size {
            for px in 0..size {
                let mut hits = 0usize;
                for sy in 0..n {
                    for sx in 0..n {
                        let x = px as f64 + (sx as f64 + 0.5) / n as f64 - self.cx;
                        let y = py as f64 + (sy as f64 + 0.5) / n as f64 - self.cy;
                        if self.kind.contains(x, y, self.radius) {
                            hits += 1;
                        }
                    }
                }
                out[py * size + px] = self.intensity * hits as f64 / (n * n) as f64;
            }
        }
        out
    }

    /// Rendering mapped to `[−1, 1]` as a one-channel image.
    pub fn image(&self, size: usize) -> Image {
        let data = self
            .render(size)
            .iter()
            .map(|&v| (2.0 * v - 1.0) as f32)
            .collect();
        Image::from_vec(1, size, size, data).expect("sized")
    }
}

/// Single-channel images of one shape on a constant background. The class
/// of sample `i` is `i mod 4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapesDataset {
    pub size: usize,
    pub seed: u64,
    /// Maximum center offset as a fraction of the image size.
    pub jitter: f64,
}

impl ShapesDataset {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            size,
            seed,
            jitter: 0.08,
        }
    }

    pub fn params(&self, index: u64) -> ShapeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let s = self.size as f64;
        let kind = ShapeKind::ALL[(index % 4) as usize];
        let dx = rng.gen_range(-1.0..=1.0) * self.jitter * s;
        let dy = rng.gen_range(-1.0..=1.0) * self.jitter * s;
        let radius = rng.gen_range(0.25..=0.4) * s;
        let intensity = rng.gen_range(0.5..=1.0);
        ShapeParams {
            kind,
            cx: s / 2.0 + dx,
            cy: s / 2.0 + dy,
            radius,
            intensity,
        }
    }

    /// Image in `[−1, 1]` and its class.
    pub fn sample(&self, index: u64) -> (Image, usize) {
        let p = self.params(index);
        (p.image(self.size), p.kind.class_id())
    }

    /// Centered shape with mid-range radius and intensity.
    pub fn template(&self, kind: ShapeKind) -> Image {
        self.template_with_radius(kind, 0.325)
    }

    /// Centered shape with radius `radius · size`.
    pub fn template_with_radius(&self, kind: ShapeKind, radius: f64) -> Image {
        let s = self.size as f64;
        ShapeParams {
            kind,
            cx: s / 2.0,
            cy: s / 2.0,
            radius: radius * s,
            intensity: 0.75,
        }
        .image(self.size)
    }
}

const TEMPLATE_RADII: [f64; 4] = [0.25, 0.3, 0.35, 0.4];

/// Nearest-template classifier: the class whose centered template, at any
/// of a few radii and any integer shift within the dataset jitter, has the highest Pearson
/// correlation with the image.
pub fn classify_by_template(dataset: &ShapesDataset, image: &Image) -> usize {
    let reach = (dataset.jitter * dataset.size as f64).ceil() as i64;
    let n = dataset.size as i64;
    let mut best = (f64::NEG_INFINITY, 0);
    for kind in ShapeKind::ALL {
        for radius in TEMPLATE_RADII {
            let t = dataset.template_with_radius(kind, radius);
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    // Shift with background fill.
                    let shifted: Vec<f32> = (0..n * n)
                        .map(|i| {
                            let (y, x) = (i / n - dy, i % n - dx);
                            if (0..n).contains(&y) && (0..n).contains(&x) {
                                t.data()[(y * n + x) as usize]
                            } else {
                                -1.0
                            }
                        })
                        .collect();
                    let c = correlation(&shifted, image.data());
                    if c > best.0 {
                        best = (c, kind.class_id());
                    }
                }
            }
        }
    }
    best.1
}

fn correlation(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        num += x * y;
        va += x * x;
        vb += y * y;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    num / (va * vb).sqrt()
}
