//! 2D rotary embedding and fixed 2D sin-cos position features.
//!
//! Within each head, the first half of the rotary pairs rotate with the
//! patch row and the rest with the patch column. Angles depend only on the
//! grid coordinates, so any subset of tokens in any order sees the same
//! geometry as the full sequence.

use crate::tensor::Matrix;

/// Rotary frequency base. Patch grids here are at most a few dozen patches
/// wide, so a small base keeps every frequency band useful.
pub const ROPE_BASE: f32 = 100.0;
const POS_EMBED_BASE: f32 = 10_000.0;

#[derive(Clone, Copy, Debug)]
struct PairFreq {
    use_row: bool,
    omega: f32,
}

fn pair_freqs(head_dim: usize) -> Vec<PairFreq> {
    let pairs = head_dim / 2;
    let row_pairs = pairs.div_ceil(2);
    let col_pairs = pairs - row_pairs;
    (0..pairs)
        .map(|j| {
            let (use_row, jj, n) = if j < row_pairs {
                (true, j, row_pairs)
            } else {
                (false, j - row_pairs, col_pairs)
            };
            PairFreq {
                use_row,
                omega: ROPE_BASE.powf(-(jj as f32) / n as f32),
            }
        })
        .collect()
}

fn rotate_row(
    row: &mut [f32],
    pos: (usize, usize),
    heads: usize,
    freqs: &[PairFreq],
    inverse: bool,
) {
    let head_dim = freqs.len() * 2;
    for h in 0..heads {
        let head = &mut row[h * head_dim..(h + 1) * head_dim];
        for (j, f) in freqs.iter().enumerate() {
            let p = if f.use_row { pos.0 } else { pos.1 } as f32;
            let angle = p * f.omega;
            let (s, c) = angle.sin_cos();
            let s = if inverse { -s } else { s };
            let x0 = head[2 * j];
            let x1 = head[2 * j + 1];
            head[2 * j] = x0 * c - x1 * s;
            head[2 * j + 1] = x0 * s + x1 * c;
        }
    }
}

/// Rotates row `i` of `x` by position `positions[i]`.
pub fn apply_rope(x: &mut Matrix, positions: &[(usize, usize)], heads: usize) {
    let freqs = pair_freqs(x.cols() / heads);
    for (i, &pos) in positions.iter().enumerate() {
        rotate_row(x.row_mut(i), pos, heads, &freqs, false);
    }
}

/// Rotates row `rows[i]` of `x` by `positions[i]`; other rows untouched.
pub fn apply_rope_rows(x: &mut Matrix, rows: &[usize], positions: &[(usize, usize)], heads: usize) {
    let freqs = pair_freqs(x.cols() / heads);
    for (&r, &pos) in rows.iter().zip(positions) {
        rotate_row(x.row_mut(r), pos, heads, &freqs, false);
    }
}

/// Transpose of [`apply_rope`], used to pull gradients back through the rotation.
pub fn apply_rope_inverse(x: &mut Matrix, positions: &[(usize, usize)], heads: usize) {
    let freqs = pair_freqs(x.cols() / heads);
    for (i, &pos) in positions.iter().enumerate() {
        rotate_row(x.row_mut(i), pos, heads, &freqs, true);
    }
}

/// Fixed sin-cos features for a grid position: the first half of the
/// channels encode the row, the second half the column.
pub fn position_features(pos: (usize, usize), dim: usize, out: &mut [f32]) {
    let quarter = dim / 4;
    for (axis, p) in [pos.0, pos.1].into_iter().enumerate() {
        let base = axis * 2 * quarter;
        for i in 0..quarter {
            let omega = POS_EMBED_BASE.powf(-(i as f32) / quarter as f32);
            let a = p as f32 * omega;
            out[base + i] = a.sin();
            out[base + quarter + i] = a.cos();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_preserves_norm_and_inverts() {
        let mut m =
            Matrix::from_vec(2, 8, (0..16).map(|v| v as f32 * 0.1 - 0.5).collect()).unwrap();
        let orig = m.clone();
        let pos = [(3, 5), (0, 7)];
        apply_rope(&mut m, &pos, 2);
        for r in 0..2 {
            let n0: f32 = orig.row(r).iter().map(|v| v * v).sum();
            let n1: f32 = m.row(r).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-5);
        }
        apply_rope_inverse(&mut m, &pos, 2);
        assert!(m.max_abs_diff(&orig) < 1e-6);
    }

    #[test]
    fn relative_position_property() {
        // <R(p)q, R(p')k> depends only on p - p'.
        let q = vec![0.3f32, -0.2, 0.5, 0.1];
        let k = vec![-0.4f32, 0.6, 0.2, 0.9];
        let dot = |pq: (usize, usize), pk: (usize, usize)| {
            let mut a = Matrix::from_vec(1, 4, q.clone()).unwrap();
            let mut b = Matrix::from_vec(1, 4, k.clone()).unwrap();
            apply_rope(&mut a, &[pq], 1);
            apply_rope(&mut b, &[pk], 1);
            a.row(0)
                .iter()
                .zip(b.row(0))
                .map(|(x, y)| x * y)
                .sum::<f32>()
        };
        assert!((dot((2, 3), (1, 1)) - dot((5, 6), (4, 4))).abs() < 1e-5);
    }

    #[test]
    fn row_subset_matches_full() {
        let data: Vec<f32> = (0..24).map(|v| (v as f32).sin()).collect();
        let mut full = Matrix::from_vec(3, 8, data.clone()).unwrap();
        let pos = [(0, 0), (1, 2), (2, 1)];
        apply_rope(&mut full, &pos, 2);
        let mut part = Matrix::from_vec(3, 8, data).unwrap();
        apply_rope_rows(&mut part, &[1], &[(1, 2)], 2);
        assert_eq!(part.row(1), full.row(1));
    }
}
