//! Forward passes of the toy DiT.
//!
//! Two paths share the per-block math:
//! - [`DitModel::forward_dense`] runs the whole patch sequence with plain
//!   GeMMs. It is the reference path and the one training differentiates.
//! - [`DitModel::forward`] runs an arbitrary subset of tokens. Keys and
//!   values of the subset are scattered straight into the layer's
//!   [`KvCache`] by the projection GeMM; attention then reads either the
//!   full cache (recovery) or only the subset's rows.
//!
//! With every token active both paths perform identical arithmetic, so
//! their outputs are bit-equal.

use super::cache::{KvCache, LayerKv};
use super::flops::FlopCounter;
use super::model::{DitModel, TIME_FEATURES};
use super::rope::{apply_rope, apply_rope_rows, position_features};
use crate::error::{RasError, Result};
use crate::image::Image;
use crate::tensor::{
    check_distinct, gemm, gemm_nt, gemm_scatter_rows, rms_norm_rows, silu, softmax_rows_in_place,
    IndexSet, Matrix,
};

/// Noise levels are scaled by this before the sinusoidal features.
pub const SIGMA_SCALE: f32 = 1000.0;

/// Patchified and embedded tokens of the active patches.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `|active| × d` embedded patches.
    pub tokens: Matrix,
    /// Grid (row, col) of each token.
    pub positions: Vec<(usize, usize)>,
    pub active: IndexSet,
}

/// Conditioning vectors derived from the noise level and class.
#[derive(Clone, Debug)]
pub(crate) struct Conditioning {
    pub feats: Matrix,
    pub a1: Matrix,
    pub c: Matrix,
    pub cs: Matrix,
    pub class_id: Option<usize>,
    /// Per block: shift1, scale1, gate1, shift2, scale2, gate2 (each `d`).
    pub block_mods: Vec<Vec<f32>>,
    /// Output norm: shift, scale.
    pub final_mod: Vec<f32>,
}

/// Activations of one block kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BlockRecord {
    pub x_in: Matrix,
    pub n1: Matrix,
    pub inv1: Vec<f32>,
    pub m1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub attn_cat: Matrix,
    pub att: Matrix,
    pub x_mid: Matrix,
    pub n2: Matrix,
    pub inv2: Vec<f32>,
    pub m2: Matrix,
    pub u: Matrix,
    pub g: Matrix,
    pub mlp: Matrix,
}

/// Everything the dense forward computed, for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ForwardRecord {
    pub patches: Matrix,
    pub positions: Vec<(usize, usize)>,
    pub cond: Conditioning,
    pub blocks: Vec<BlockRecord>,
    pub x_final: Matrix,
    pub nf: Matrix,
    pub invf: Vec<f32>,
    pub mf: Matrix,
}

enum KvTarget<'a> {
    Dense,
    Cache {
        kv: &'a mut LayerKv,
        rows: &'a [usize],
        recovery: bool,
    },
}

/// Sinusoidal features of a noise level: `[cos(t·ω_i), sin(t·ω_i)]` with
/// `t = σ·1000` and `ω_i = 10000^(−i/128)`.
pub fn time_features(sigma: f32) -> Vec<f32> {
    let half = TIME_FEATURES / 2;
    let t = sigma * SIGMA_SCALE;
    let mut out = vec![0.0; TIME_FEATURES];
    for i in 0..half {
        let omega = (-(10_000f32.ln()) * i as f32 / half as f32).exp();
        let a = t * omega;
        out[i] = a.cos();
        out[half + i] = a.sin();
    }
    out
}

pub(crate) fn modulate(n: &Matrix, shift: &[f32], scale: &[f32]) -> Matrix {
    let mut m = n.clone();
    let d = n.cols();
    for row in m.data_mut().chunks_mut(d) {
        for ((x, sh), sc) in row.iter_mut().zip(shift).zip(scale) {
            *x = *x * (1.0 + sc) + sh;
        }
    }
    m
}

fn head_slice(x: &Matrix, h: usize, head_dim: usize) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), head_dim);
    for r in 0..x.rows() {
        out.row_mut(r)
            .copy_from_slice(&x.row(r)[h * head_dim..(h + 1) * head_dim]);
    }
    out
}

/// Multi-head scaled dot-product attention of `q` against `k`/`v`.
/// Returns the concatenated head outputs and each head's probabilities.
pub(crate) fn attend(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> (Matrix, Vec<Matrix>) {
    let d = q.cols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(q, h, hd);
        let kh = head_slice(k, h, hd);
        let vh = head_slice(v, h, hd);
        let mut s = gemm_nt(&qh, &kh).expect("head shapes agree");
        for x in s.data_mut() {
            *x *= scale;
        }
        softmax_rows_in_place(&mut s);
        let oh = gemm(&s, &vh, None).expect("head shapes agree");
        for r in 0..q.rows() {
            out.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(oh.row(r));
        }
        probs.push(s);
    }
    (out, probs)
}

/// Multi-head attention with shape checks; `q` is `n × d`, `k` and `v`
/// are `m × d`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Matrix> {
    let d = q.cols();
    if heads == 0
        || !d.is_multiple_of(heads)
        || k.cols() != d
        || v.cols() != d
        || k.rows() != v.rows()
    {
        return Err(RasError::shape(
            "attention",
            format!(
                "q {:?}, k {:?}, v {:?} with {heads} heads",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    if k.rows() == 0 {
        return Err(RasError::shape("attention", "no keys"));
    }
    Ok(attend(q, k, v, heads).0)
}

/// Attention of the active queries against a layer's key/value cache.
///
/// The key and value projections of the active inputs `x_active` are
/// written straight into rows `rows` of the cache (keys rotated at
/// `positions`). With `recovery`, queries then attend over every cache
/// row, so inactive tokens contribute their last cached keys and values;
/// without it, only the active rows are attended to.
#[allow(clippy::too_many_arguments)]
pub fn cached_attention(
    q: &Matrix,
    x_active: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    rows: &[usize],
    positions: &[(usize, usize)],
    kv: &mut LayerKv,
    heads: usize,
    recovery: bool,
) -> Result<(Matrix, Vec<Matrix>)> {
    if q.rows() != rows.len() || positions.len() != rows.len() || q.cols() != kv.k.cols() {
        return Err(RasError::shape(
            "cached_attention",
            format!(
                "{} queries, {} rows, {} positions",
                q.rows(),
                rows.len(),
                positions.len()
            ),
        ));
    }
    if heads == 0 || !q.cols().is_multiple_of(heads) || kv.k.shape() != kv.v.shape() {
        return Err(RasError::shape(
            "cached_attention",
            "head split or cache shape",
        ));
    }
    gemm_scatter_rows(x_active, wk, rows, &mut kv.k)?;
    apply_rope_rows(&mut kv.k, rows, positions, heads);
    gemm_scatter_rows(x_active, wv, rows, &mut kv.v)?;
    if recovery {
        Ok(attend(q, &kv.k, &kv.v, heads))
    } else {
        let k = kv.k.select_rows(rows)?;
        let v = kv.v.select_rows(rows)?;
        Ok(attend(q, &k, &v, heads))
    }
}

fn count(flops: &mut Option<&mut FlopCounter>, f: impl FnOnce(&mut FlopCounter)) {
    if let Some(c) = flops.as_deref_mut() {
        f(c);
    }
}

impl DitModel {
    pub(crate) fn conditioning(
        &self,
        sigma: f32,
        class_id: Option<usize>,
        flops: &mut Option<&mut FlopCounter>,
    ) -> Result<Conditioning> {
        if !sigma.is_finite() {
            return Err(RasError::NonFinite(format!("noise level {sigma}")));
        }
        if let Some(c) = class_id {
            if c >= self.config.num_classes {
                return Err(RasError::InvalidConfig(format!(
                    "class {c} out of range for {} classes",
                    self.config.num_classes
                )));
            }
        }
        let d = self.config.hidden_dim;
        let feats = Matrix::from_vec(1, TIME_FEATURES, time_features(sigma))?;
        let mut a1 = gemm(&feats, &self.time_w1, None)?;
        a1.add_row_broadcast(self.time_b1.data());
        let mut s1 = a1.clone();
        s1.data_mut().iter_mut().for_each(|x| *x = silu(*x));
        let mut c = gemm(&s1, &self.time_w2, None)?;
        c.add_row_broadcast(self.time_b2.data());
        if let Some(cls) = class_id {
            c.add_row_broadcast(self.class_emb.row(cls));
        }
        let mut cs = c.clone();
        cs.data_mut().iter_mut().for_each(|x| *x = silu(*x));
        let mut block_mods = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut m = gemm(&cs, &b.ada_w, None)?;
            m.add_row_broadcast(b.ada_b.data());
            block_mods.push(m.into_vec());
        }
        let mut fm = gemm(&cs, &self.final_ada_w, None)?;
        fm.add_row_broadcast(self.final_ada_b.data());
        count(flops, |f| {
            f.conditioning += FlopCounter::gemm(1, TIME_FEATURES, d)
                + FlopCounter::gemm(1, d, d)
                + self.blocks.len() as u64 * FlopCounter::gemm(1, d, 6 * d)
                + FlopCounter::gemm(1, d, 2 * d);
        });
        Ok(Conditioning {
            feats,
            a1,
            c,
            cs,
            class_id,
            block_mods,
            final_mod: fm.into_vec(),
        })
    }

    fn add_position_features(&self, x: &mut Matrix, positions: &[(usize, usize)]) {
        let d = self.config.hidden_dim;
        let mut buf = vec![0.0; d];
        for (i, &pos) in positions.iter().enumerate() {
            position_features(pos, d, &mut buf);
            for (v, p) in x.row_mut(i).iter_mut().zip(&buf) {
                *v += p;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        layer: usize,
        x: &Matrix,
        positions: &[(usize, usize)],
        mods: &[f32],
        target: KvTarget<'_>,
        flops: &mut Option<&mut FlopCounter>,
        keep: bool,
    ) -> Result<(Matrix, Option<BlockRecord>)> {
        let b = &self.blocks[layer];
        let d = self.config.hidden_dim;
        let heads = self.config.heads;
        let n = x.rows();
        let (shift1, rest) = mods.split_at(d);
        let (scale1, rest) = rest.split_at(d);
        let (gate1, rest) = rest.split_at(d);
        let (shift2, rest) = rest.split_at(d);
        let (scale2, gate2) = rest.split_at(d);

        let (n1, inv1) = rms_norm_rows(x);
        let m1 = modulate(&n1, shift1, scale1);
        let mut q = gemm(&m1, &b.wq, None)?;
        apply_rope(&mut q, positions, heads);

        let (attn_cat, probs, k_rec, v_rec, keys) = match target {
            KvTarget::Dense => {
                let mut k = gemm(&m1, &b.wk, None)?;
                apply_rope(&mut k, positions, heads);
                let v = gemm(&m1, &b.wv, None)?;
                let (o, p) = attend(&q, &k, &v, heads);
                let keys = k.rows();
                (o, p, k, v, keys)
            }
            KvTarget::Cache { kv, rows, recovery } => {
                let (o, p) =
                    cached_attention(&q, &m1, &b.wk, &b.wv, rows, positions, kv, heads, recovery)?;
                let keys = if recovery { kv.k.rows() } else { rows.len() };
                (o, p, Matrix::zeros(0, 0), Matrix::zeros(0, 0), keys)
            }
        };
        let mut att = gemm(&attn_cat, &b.wo, None)?;
        att.add_row_broadcast(b.bo.data());

        let mut x_mid = x.clone();
        for (row, arow) in x_mid.data_mut().chunks_mut(d).zip(att.data().chunks(d)) {
            for ((xv, a), g) in row.iter_mut().zip(arow).zip(gate1) {
                *xv += g * a;
            }
        }

        let (n2, inv2) = rms_norm_rows(&x_mid);
        let m2 = modulate(&n2, shift2, scale2);
        let mut u = gemm(&m2, &b.mlp_w1, None)?;
        u.add_row_broadcast(b.mlp_b1.data());
        let mut g = u.clone();
        g.data_mut()
            .iter_mut()
            .for_each(|v| *v = crate::tensor::gelu(*v));
        let mut mlp = gemm(&g, &b.mlp_w2, None)?;
        mlp.add_row_broadcast(b.mlp_b2.data());

        let mut x_out = x_mid.clone();
        for (row, mrow) in x_out.data_mut().chunks_mut(d).zip(mlp.data().chunks(d)) {
            for ((xv, m), gt) in row.iter_mut().zip(mrow).zip(gate2) {
                *xv += gt * m;
            }
        }
        if !x_out.is_finite() {
            return Err(RasError::NonFiniteLayer { layer });
        }

        let h = self.config.mlp_dim();
        count(flops, |f| {
            f.token_linear += 4 * FlopCounter::gemm(n, d, d)
                + FlopCounter::gemm(n, d, h)
                + FlopCounter::gemm(n, h, d);
            f.attention += 2 * FlopCounter::gemm(n, d, keys);
        });

        let record = keep.then(|| BlockRecord {
            x_in: x.clone(),
            n1,
            inv1,
            m1,
            q,
            k: k_rec,
            v: v_rec,
            probs,
            attn_cat,
            att,
            x_mid,
            n2,
            inv2,
            m2,
            u,
            g,
            mlp,
        });
        Ok((x_out, record))
    }

    fn final_layer(
        &self,
        x: &Matrix,
        cond: &Conditioning,
        flops: &mut Option<&mut FlopCounter>,
    ) -> Result<(Matrix, Matrix, Vec<f32>, Matrix)> {
        let d = self.config.hidden_dim;
        let (nf, invf) = rms_norm_rows(x);
        let mf = modulate(&nf, &cond.final_mod[..d], &cond.final_mod[d..]);
        let mut out = gemm(&mf, &self.out_w, None)?;
        out.add_row_broadcast(self.out_b.data());
        count(flops, |f| {
            f.token_linear += FlopCounter::gemm(x.rows(), d, self.config.patch_dim());
        });
        Ok((out, nf, invf, mf))
    }

    /// Extracts the listed patches and embeds them: `patches · W + b`.
    pub fn patchify(
        &self,
        sample: &Image,
        active: &IndexSet,
        mut flops: Option<&mut FlopCounter>,
    ) -> Result<TokenSequence> {
        let grid = self.config.grid();
        grid.check_image(sample)?;
        if active.universe() != grid.num_patches() {
            return Err(RasError::shape(
                "patchify",
                format!(
                    "index set over {} patches, grid has {}",
                    active.universe(),
                    grid.num_patches()
                ),
            ));
        }
        let patches = self.read_patches(sample, active.indices());
        let mut tokens = gemm(&patches, &self.patch_w, None)?;
        tokens.add_row_broadcast(self.patch_b.data());
        count(&mut flops, |f| {
            f.token_linear += FlopCounter::gemm(
                active.len(),
                self.config.patch_dim(),
                self.config.hidden_dim,
            );
        });
        Ok(TokenSequence {
            tokens,
            positions: active.indices().iter().map(|&p| grid.position(p)).collect(),
            active: active.clone(),
        })
    }

    pub(crate) fn read_patches(&self, sample: &Image, patches: &[usize]) -> Matrix {
        let grid = self.config.grid();
        let mut out = Matrix::zeros(patches.len(), grid.patch_dim());
        for (i, &p) in patches.iter().enumerate() {
            grid.read_patch(sample, p, out.row_mut(i));
        }
        out
    }

    /// Noise prediction for the tokens of `x`.
    ///
    /// Keys and values of the active tokens are written into `cache`. With
    /// `use_recovery`, queries attend over the full cache, so inactive
    /// tokens contribute their most recently cached keys and values;
    /// otherwise attention sees the active tokens only.
    pub fn forward(
        &self,
        x: &TokenSequence,
        sigma: f32,
        class_id: Option<usize>,
        cache: &mut KvCache,
        use_recovery: bool,
        flops: Option<&mut FlopCounter>,
    ) -> Result<Matrix> {
        self.forward_indices(
            &x.tokens,
            x.active.indices(),
            sigma,
            class_id,
            cache,
            use_recovery,
            flops,
        )
    }

    /// As [`DitModel::forward`], for embedded tokens at arbitrary distinct
    /// patch indices in any order.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_indices(
        &self,
        tokens: &Matrix,
        indices: &[usize],
        sigma: f32,
        class_id: Option<usize>,
        cache: &mut KvCache,
        use_recovery: bool,
        mut flops: Option<&mut FlopCounter>,
    ) -> Result<Matrix> {
        let grid = self.config.grid();
        let num_patches = grid.num_patches();
        let d = self.config.hidden_dim;
        if tokens.rows() != indices.len() || tokens.cols() != d {
            return Err(RasError::shape(
                "forward",
                format!(
                    "{}x{} tokens for {} indices at width {d}",
                    tokens.rows(),
                    tokens.cols(),
                    indices.len()
                ),
            ));
        }
        check_distinct(indices, num_patches)?;
        if cache.layers.len() != self.blocks.len()
            || cache
                .layers
                .iter()
                .any(|l| l.k.shape() != (num_patches, d) || l.v.shape() != (num_patches, d))
        {
            return Err(RasError::shape("forward", "kv cache does not match model"));
        }
        let full = indices.len() == num_patches;
        if use_recovery && !full && !cache.is_valid() {
            return Err(RasError::CacheInvalid);
        }

        let positions: Vec<_> = indices.iter().map(|&p| grid.position(p)).collect();
        let cond = self.conditioning(sigma, class_id, &mut flops)?;
        let mut x = tokens.clone();
        self.add_position_features(&mut x, &positions);
        for (l, kv) in cache.layers.iter_mut().enumerate() {
            let target = KvTarget::Cache {
                kv,
                rows: indices,
                recovery: use_recovery,
            };
            let (next, _) = self.block_forward(
                l,
                &x,
                &positions,
                &cond.block_mods[l],
                target,
                &mut flops,
                false,
            )?;
            x = next;
        }
        if full {
            cache.mark_filled();
        }
        let (out, ..) = self.final_layer(&x, &cond, &mut flops)?;
        Ok(out)
    }

    /// Reference forward over every patch with no index machinery or cache.
    /// Returns the prediction as an image.
    pub fn forward_dense(
        &self,
        sample: &Image,
        sigma: f32,
        class_id: Option<usize>,
        flops: Option<&mut FlopCounter>,
    ) -> Result<Image> {
        let grid = self.config.grid();
        grid.check_image(sample)?;
        let all: Vec<usize> = (0..grid.num_patches()).collect();
        let patches = self.read_patches(sample, &all);
        let (out, _) = self.forward_patches(&patches, sigma, class_id, flops, false)?;
        let mut img = Image::zeros(grid.channels, grid.height, grid.width);
        for p in 0..grid.num_patches() {
            grid.write_patch(&mut img, p, out.row(p));
        }
        Ok(img)
    }

    /// Dense forward from the full `num_patches × patch_dim` matrix,
    /// optionally keeping activations for backpropagation.
    pub(crate) fn forward_patches(
        &self,
        patches: &Matrix,
        sigma: f32,
        class_id: Option<usize>,
        mut flops: Option<&mut FlopCounter>,
        keep: bool,
    ) -> Result<(Matrix, Option<ForwardRecord>)> {
        let grid = self.config.grid();
        let d = self.config.hidden_dim;
        if patches.shape() != (grid.num_patches(), grid.patch_dim()) {
            return Err(RasError::shape("forward_dense", "patch matrix shape"));
        }
        let positions: Vec<_> = (0..grid.num_patches()).map(|p| grid.position(p)).collect();
        let cond = self.conditioning(sigma, class_id, &mut flops)?;
        let mut x = gemm(patches, &self.patch_w, None)?;
        x.add_row_broadcast(self.patch_b.data());
        count(&mut flops, |f| {
            f.token_linear += FlopCounter::gemm(patches.rows(), grid.patch_dim(), d);
        });
        self.add_position_features(&mut x, &positions);
        let mut blocks = Vec::new();
        for l in 0..self.blocks.len() {
            let (next, rec) = self.block_forward(
                l,
                &x,
                &positions,
                &cond.block_mods[l],
                KvTarget::Dense,
                &mut flops,
                keep,
            )?;
            blocks.extend(rec);
            x = next;
        }
        let (out, nf, invf, mf) = self.final_layer(&x, &cond, &mut flops)?;
        let record = keep.then(|| ForwardRecord {
            patches: patches.clone(),
            positions,
            cond,
            blocks,
            x_final: x,
            nf,
            invf,
            mf,
        });
        Ok((out, record))
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(
            self.blocks.len(),
            self.config.num_patches(),
            self.config.hidden_dim,
        )
    }
}

/// Writes token rows back into `dest` at the active patch locations only.
pub fn unpatchify(
    grid: &crate::image::PatchGrid,
    noise_tokens: &Matrix,
    active: &IndexSet,
    dest: &mut Image,
) -> Result<()> {
    grid.check_image(dest)?;
    if noise_tokens.rows() != active.len() || noise_tokens.cols() != grid.patch_dim() {
        return Err(RasError::shape(
            "unpatchify",
            format!(
                "{}x{} tokens for {} patches of dim {}",
                noise_tokens.rows(),
                noise_tokens.cols(),
                active.len(),
                grid.patch_dim()
            ),
        ));
    }
    if let Some(&bad) = active.indices().iter().find(|&&p| p >= grid.num_patches()) {
        return Err(RasError::IndexOutOfRange {
            index: bad,
            len: grid.num_patches(),
        });
    }
    for (i, &p) in active.indices().iter().enumerate() {
        grid.write_patch(dest, p, noise_tokens.row(i));
    }
    Ok(())
}
