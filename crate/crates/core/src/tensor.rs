//! Dense f32 kernels and the token-sparse fused GeMM variants.
//!
//! Every product here sums over the inner dimension in ascending order,
//! starting from the initial value of the output element (zero, or the
//! accumulator when one is supplied). The fused kernels reuse the same
//! inner loop as [`gemm`], so a gathered or scattered product is
//! bit-identical to the equivalent copy-then-multiply composition.

use rayon::prelude::*;

use crate::error::{RasError, Result};

/// Row-major 2D matrix of f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(RasError::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(RasError::shape("Matrix::from_rows", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(rows.len(), self.cols);
        for (dst, &src) in rows.iter().enumerate() {
            if src >= self.rows {
                return Err(RasError::IndexOutOfRange {
                    index: src,
                    len: self.rows,
                });
            }
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds a bias row to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f32]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_mut(self.cols.max(1)) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    /// Column sums, accumulated in row order.
    pub fn col_sums(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Strictly increasing row positions into a sequence of length `universe`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSet {
    indices: Vec<usize>,
    universe: usize,
}

impl IndexSet {
    pub fn new(indices: Vec<usize>, universe: usize) -> Result<Self> {
        for w in indices.windows(2) {
            if w[1] <= w[0] {
                return Err(RasError::InvalidIndexSet(format!(
                    "indices must be strictly increasing, found {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= universe {
                return Err(RasError::IndexOutOfRange {
                    index: last,
                    len: universe,
                });
            }
        }
        Ok(Self { indices, universe })
    }

    pub fn full(universe: usize) -> Self {
        Self {
            indices: (0..universe).collect(),
            universe,
        }
    }

    pub fn empty(universe: usize) -> Self {
        Self {
            indices: Vec::new(),
            universe,
        }
    }

    pub fn from_mask(flags: &[bool]) -> Self {
        Self {
            indices: flags
                .iter()
                .enumerate()
                .filter_map(|(i, &f)| f.then_some(i))
                .collect(),
            universe: flags.len(),
        }
    }

    #[inline]
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    #[inline]
    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.universe
    }
}

/// Rejects duplicate or out-of-range entries in an unordered index list.
pub(crate) fn check_distinct(indices: &[usize], len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    for &i in indices {
        if i >= len {
            return Err(RasError::IndexOutOfRange { index: i, len });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(RasError::InvalidIndexSet(format!("duplicate index {i}")));
        }
    }
    Ok(())
}

const ROW_TILE: usize = 4;
const COL_TILE: usize = 256;
/// Below this many multiply-adds the kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

/// `c[r] += a[r] · b` for a tile of rows. Each output element accumulates
/// over k in ascending order.
#[inline]
fn tile_kernel(a: &[&[f32]], c: &mut [&mut [f32]], b: &[f32], k_dim: usize, n: usize) {
    let mut jb = 0;
    while jb < n {
        let je = (jb + COL_TILE).min(n);
        for k in 0..k_dim {
            let brow = &b[k * n + jb..k * n + je];
            for (arow, crow) in a.iter().zip(c.iter_mut()) {
                let av = arow[k];
                for (cj, bj) in crow[jb..je].iter_mut().zip(brow) {
                    *cj += av * bj;
                }
            }
        }
        jb = je;
    }
}

/// Runs the shared kernel over pairs of (input row, output row). The output
/// rows must already hold their initial values.
fn run_rows<'a>(pairs: Vec<(&'a [f32], &'a mut [f32])>, b: &Matrix) {
    let k_dim = b.rows;
    let n = b.cols;
    let work = pairs.len() * k_dim * n;
    let run_tile = |tile: &mut [(&[f32], &mut [f32])]| {
        let a: Vec<&[f32]> = tile.iter().map(|(a, _)| *a).collect();
        let mut c: Vec<&mut [f32]> = tile.iter_mut().map(|(_, c)| &mut **c).collect();
        tile_kernel(&a, &mut c, &b.data, k_dim, n);
    };
    let mut pairs = pairs;
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        pairs.par_chunks_mut(ROW_TILE).for_each(run_tile);
    } else {
        pairs.chunks_mut(ROW_TILE).for_each(run_tile);
    }
}

/// Standard product `a · b`, optionally accumulated onto an existing matrix.
pub fn gemm(a: &Matrix, b: &Matrix, accumulate_into: Option<&Matrix>) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(RasError::shape(
            "gemm",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = match accumulate_into {
        Some(acc) => {
            if acc.shape() != (a.rows, b.cols) {
                return Err(RasError::shape(
                    "gemm",
                    format!(
                        "accumulator {}x{} for a {}x{} product",
                        acc.rows, acc.cols, a.rows, b.cols
                    ),
                ));
            }
            acc.clone()
        }
        None => Matrix::zeros(a.rows, b.cols),
    };
    if b.cols == 0 || a.rows == 0 || a.cols == 0 {
        return Ok(out);
    }
    let pairs = a
        .data
        .chunks(a.cols)
        .zip(out.data.chunks_mut(b.cols))
        .collect();
    run_rows(pairs, b);
    Ok(out)
}

/// `aᵀ · b` without exposing the transpose to callers.
pub fn gemm_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(&a.transpose(), b, None)
}

/// `a · bᵀ`.
pub fn gemm_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(a, &b.transpose(), None)
}

/// Computes `x_full[active] · w`, reading the selected rows straight out of
/// `x_full` during the kernel's input loading.
pub fn gather_gemm(x_full: &Matrix, active: &IndexSet, w: &Matrix) -> Result<Matrix> {
    gather_gemm_rows(x_full, active.indices(), w)
}

pub(crate) fn gather_gemm_rows(x_full: &Matrix, rows: &[usize], w: &Matrix) -> Result<Matrix> {
    if x_full.cols != w.rows {
        return Err(RasError::shape(
            "gather_gemm",
            format!("x_full has {} cols, w has {} rows", x_full.cols, w.rows),
        ));
    }
    if let Some(&bad) = rows.iter().find(|&&i| i >= x_full.rows) {
        return Err(RasError::IndexOutOfRange {
            index: bad,
            len: x_full.rows,
        });
    }
    let mut out = Matrix::zeros(rows.len(), w.cols);
    if w.cols == 0 || rows.is_empty() {
        return Ok(out);
    }
    let pairs = rows
        .iter()
        .map(|&i| x_full.row(i))
        .zip(out.data.chunks_mut(w.cols))
        .collect();
    run_rows(pairs, w);
    Ok(out)
}

/// Computes `x_active · w` and writes row `i` of the product into row
/// `active[i]` of `dest_full`. Rows not in `active` are left untouched.
/// All shapes and indices are validated before anything is written.
pub fn gemm_scatter(
    x_active: &Matrix,
    w: &Matrix,
    active: &IndexSet,
    dest_full: &mut Matrix,
) -> Result<()> {
    gemm_scatter_rows(x_active, w, active.indices(), dest_full)
}

pub(crate) fn gemm_scatter_rows(
    x_active: &Matrix,
    w: &Matrix,
    rows: &[usize],
    dest_full: &mut Matrix,
) -> Result<()> {
    if x_active.cols != w.rows {
        return Err(RasError::shape(
            "gemm_scatter",
            format!("x_active has {} cols, w has {} rows", x_active.cols, w.rows),
        ));
    }
    if x_active.rows != rows.len() {
        return Err(RasError::shape(
            "gemm_scatter",
            format!("{} input rows for {} indices", x_active.rows, rows.len()),
        ));
    }
    if dest_full.cols != w.cols {
        return Err(RasError::shape(
            "gemm_scatter",
            format!("dest has {} cols, w has {}", dest_full.cols, w.cols),
        ));
    }
    check_distinct(rows, dest_full.rows)?;
    if rows.is_empty() || w.cols == 0 {
        return Ok(());
    }
    let n = w.cols;
    let mut slots: Vec<Option<&mut [f32]>> = dest_full.data.chunks_mut(n).map(Some).collect();
    let pairs = rows
        .iter()
        .enumerate()
        .map(|(src, &dst)| {
            let out = slots[dst].take().expect("indices checked distinct");
            out.fill(0.0);
            (x_active.row(src), out)
        })
        .collect();
    run_rows(pairs, w);
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Matrix) -> Result<Matrix> {
    if !a.is_finite() {
        return Err(RasError::NonFinite("softmax input".into()));
    }
    let mut out = a.clone();
    softmax_rows_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_rows_in_place(a: &mut Matrix) {
    let cols = a.cols;
    if cols == 0 {
        return;
    }
    for row in a.data.chunks_mut(cols) {
        softmax_slice(row);
    }
}

#[inline]
pub(crate) fn softmax_slice(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub const RMS_EPS: f32 = 1e-6;

/// Parameter-free RMS normalization of each row. Returns the normalized
/// matrix and the per-row inverse RMS.
pub fn rms_norm_rows(x: &Matrix) -> (Matrix, Vec<f32>) {
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows);
    let d = x.cols.max(1);
    for row in out.data.chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        for v in row.iter_mut() {
            *v *= r;
        }
        inv.push(r);
    }
    (out, inv)
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
