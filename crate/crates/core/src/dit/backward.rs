//! Reverse-mode gradients of the dense forward pass.

use super::forward::{BlockRecord, Conditioning, ForwardRecord};
use super::model::{BlockWeights, DitModel};
use super::rope::apply_rope_inverse;
use crate::error::Result;
use crate::tensor::{gelu_grad, gemm, gemm_nt, gemm_tn, silu_grad, Matrix};

fn add_into(acc: &mut Matrix, delta: &Matrix) {
    debug_assert_eq!(acc.shape(), delta.shape());
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

fn add_slice(acc: &mut [f32], delta: &[f32]) {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

/// Pulls `dn` back through parameter-free RMS normalization.
fn rms_backward(dn: &Matrix, x: &Matrix, inv: &[f32]) -> Matrix {
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let gr = dn.row(r);
        let ir = inv[r];
        let dot: f32 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let coef = ir * ir * ir * dot / d as f32;
        for ((o, xv), g) in dx.row_mut(r).iter_mut().zip(xr).zip(gr) {
            *o = ir * g - coef * xv;
        }
    }
    dx
}

/// Backward of `m = n ⊙ (1 + scale) + shift` with per-column shift/scale.
/// Returns `dn` and accumulates the shift and scale gradients.
fn modulate_backward(
    dm: &Matrix,
    n: &Matrix,
    scale: &[f32],
    dshift: &mut [f32],
    dscale: &mut [f32],
) -> Matrix {
    let mut dn = dm.clone();
    for r in 0..dm.rows() {
        let g = dm.row(r);
        let nr = n.row(r);
        for j in 0..g.len() {
            dshift[j] += g[j];
            dscale[j] += g[j] * nr[j];
        }
        for (v, s) in dn.row_mut(r).iter_mut().zip(scale) {
            *v *= 1.0 + s;
        }
    }
    dn
}

/// Backward of `x + gate ⊙ y` with respect to `y` and `gate`.
fn gate_backward(dx: &Matrix, y: &Matrix, gate: &[f32], dgate: &mut [f32]) -> Matrix {
    let mut dy = dx.clone();
    for r in 0..dx.rows() {
        let g = dx.row(r);
        let yr = y.row(r);
        for j in 0..g.len() {
            dgate[j] += g[j] * yr[j];
        }
        for (v, s) in dy.row_mut(r).iter_mut().zip(gate) {
            *v *= s;
        }
    }
    dy
}

fn set_head(dst: &mut Matrix, src: &Matrix, h: usize, hd: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(src.row(r));
    }
}

fn get_head(src: &Matrix, h: usize, hd: usize) -> Matrix {
    let mut out = Matrix::zeros(src.rows(), hd);
    for r in 0..src.rows() {
        out.row_mut(r)
            .copy_from_slice(&src.row(r)[h * hd..(h + 1) * hd]);
    }
    out
}

/// Modulation is `cs · W + b`; accumulates its weight gradients and the
/// gradient reaching `cs`.
fn accumulate_modulation(
    gw: &mut Matrix,
    gb: &mut Matrix,
    w: &Matrix,
    dmods: &[f32],
    cond: &Conditioning,
    dcs: &mut [f32],
) -> Result<()> {
    let dm = Matrix::from_vec(1, dmods.len(), dmods.to_vec())?;
    add_into(gw, &gemm_tn(&cond.cs, &dm)?);
    add_slice(gb.data_mut(), dmods);
    add_slice(dcs, gemm_nt(&dm, w)?.data());
    Ok(())
}

impl DitModel {
    /// Accumulates into `grads` the gradient of `Σ dout ⊙ out` for the
    /// forward recorded in `rec`.
    pub(crate) fn backward(
        &self,
        rec: &ForwardRecord,
        dout: &Matrix,
        grads: &mut DitModel,
    ) -> Result<()> {
        let d = self.config.hidden_dim;
        let cond = &rec.cond;
        let mut dcs = vec![0.0f32; d];

        // Output projection and final modulation.
        add_into(&mut grads.out_w, &gemm_tn(&rec.mf, dout)?);
        add_slice(grads.out_b.data_mut(), &dout.col_sums());
        let dmf = gemm_nt(dout, &self.out_w)?;
        let mut dfinal = vec![0.0f32; 2 * d];
        let (dshift, dscale) = dfinal.split_at_mut(d);
        let dnf = modulate_backward(&dmf, &rec.nf, &cond.final_mod[d..], dshift, dscale);
        accumulate_modulation(
            &mut grads.final_ada_w,
            &mut grads.final_ada_b,
            &self.final_ada_w,
            &dfinal,
            cond,
            &mut dcs,
        )?;
        let mut dx = rms_backward(&dnf, &rec.x_final, &rec.invf);

        for l in (0..self.blocks.len()).rev() {
            let mut dmods = vec![0.0f32; 6 * d];
            dx = self.block_backward(
                &self.blocks[l],
                &rec.blocks[l],
                &rec.positions,
                &cond.block_mods[l],
                &dx,
                &mut grads.blocks[l],
                &mut dmods,
            )?;
            let gb = &mut grads.blocks[l];
            accumulate_modulation(
                &mut gb.ada_w,
                &mut gb.ada_b,
                &self.blocks[l].ada_w,
                &dmods,
                cond,
                &mut dcs,
            )?;
        }

        // Patch embedding (position features are constant).
        add_into(&mut grads.patch_w, &gemm_tn(&rec.patches, &dx)?);
        add_slice(grads.patch_b.data_mut(), &dx.col_sums());

        // Conditioning: cs = silu(c), c = time_mlp(σ) + class_emb[y].
        let dc: Vec<f32> = dcs
            .iter()
            .zip(cond.c.data())
            .map(|(g, c)| g * silu_grad(*c))
            .collect();
        if let Some(cls) = cond.class_id {
            add_slice(grads.class_emb.row_mut(cls), &dc);
        }
        let dc_m = Matrix::from_vec(1, d, dc)?;
        let mut s1 = cond.a1.clone();
        s1.data_mut()
            .iter_mut()
            .for_each(|x| *x = crate::tensor::silu(*x));
        add_into(&mut grads.time_w2, &gemm_tn(&s1, &dc_m)?);
        add_slice(grads.time_b2.data_mut(), dc_m.data());
        let ds1 = gemm_nt(&dc_m, &self.time_w2)?;
        let da1: Vec<f32> = ds1
            .data()
            .iter()
            .zip(cond.a1.data())
            .map(|(g, a)| g * silu_grad(*a))
            .collect();
        let da1 = Matrix::from_vec(1, d, da1)?;
        add_into(&mut grads.time_w1, &gemm_tn(&cond.feats, &da1)?);
        add_slice(grads.time_b1.data_mut(), da1.data());
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        w: &BlockWeights,
        rec: &BlockRecord,
        positions: &[(usize, usize)],
        mods: &[f32],
        dx_out: &Matrix,
        g: &mut BlockWeights,
        dmods: &mut [f32],
    ) -> Result<Matrix> {
        let d = self.config.hidden_dim;
        let heads = self.config.heads;
        let hd = d / heads;
        let scale1 = &mods[d..2 * d];
        let gate1 = &mods[2 * d..3 * d];
        let scale2 = &mods[4 * d..5 * d];
        let gate2 = &mods[5 * d..6 * d];
        let (dm1_shift, rest) = dmods.split_at_mut(d);
        let (dm1_scale, rest) = rest.split_at_mut(d);
        let (dgate1, rest) = rest.split_at_mut(d);
        let (dm2_shift, rest) = rest.split_at_mut(d);
        let (dm2_scale, dgate2) = rest.split_at_mut(d);

        // MLP branch.
        let dmlp = gate_backward(dx_out, &rec.mlp, gate2, dgate2);
        add_into(&mut g.mlp_w2, &gemm_tn(&rec.g, &dmlp)?);
        add_slice(g.mlp_b2.data_mut(), &dmlp.col_sums());
        let mut du = gemm_nt(&dmlp, &w.mlp_w2)?;
        for (v, u) in du.data_mut().iter_mut().zip(rec.u.data()) {
            *v *= gelu_grad(*u);
        }
        add_into(&mut g.mlp_w1, &gemm_tn(&rec.m2, &du)?);
        add_slice(g.mlp_b1.data_mut(), &du.col_sums());
        let dm2 = gemm_nt(&du, &w.mlp_w1)?;
        let dn2 = modulate_backward(&dm2, &rec.n2, scale2, dm2_shift, dm2_scale);
        let mut dx_mid = dx_out.clone();
        add_into(&mut dx_mid, &rms_backward(&dn2, &rec.x_mid, &rec.inv2));

        // Attention branch.
        let datt = gate_backward(&dx_mid, &rec.att, gate1, dgate1);
        add_into(&mut g.wo, &gemm_tn(&rec.attn_cat, &datt)?);
        add_slice(g.bo.data_mut(), &datt.col_sums());
        let dcat = gemm_nt(&datt, &w.wo)?;
        let n = rec.q.rows();
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let sc = 1.0 / (hd as f32).sqrt();
        for h in 0..heads {
            let p = &rec.probs[h];
            let doh = get_head(&dcat, h, hd);
            let vh = get_head(&rec.v, h, hd);
            let kh = get_head(&rec.k, h, hd);
            let qh = get_head(&rec.q, h, hd);
            let dp = gemm_nt(&doh, &vh)?;
            let dvh = gemm_tn(p, &doh)?;
            let mut ds = dp;
            for r in 0..n {
                let prow = p.row(r);
                let dot: f32 = ds.row(r).iter().zip(prow).map(|(a, b)| a * b).sum();
                for (v, pv) in ds.row_mut(r).iter_mut().zip(prow) {
                    *v = pv * (*v - dot) * sc;
                }
            }
            let dqh = gemm(&ds, &kh, None)?;
            let dkh = gemm_tn(&ds, &qh)?;
            set_head(&mut dq, &dqh, h, hd);
            set_head(&mut dk, &dkh, h, hd);
            set_head(&mut dv, &dvh, h, hd);
        }
        apply_rope_inverse(&mut dq, positions, heads);
        apply_rope_inverse(&mut dk, positions, heads);
        add_into(&mut g.wq, &gemm_tn(&rec.m1, &dq)?);
        add_into(&mut g.wk, &gemm_tn(&rec.m1, &dk)?);
        add_into(&mut g.wv, &gemm_tn(&rec.m1, &dv)?);
        let mut dm1 = gemm_nt(&dq, &w.wq)?;
        add_into(&mut dm1, &gemm_nt(&dk, &w.wk)?);
        add_into(&mut dm1, &gemm_nt(&dv, &w.wv)?);
        let dn1 = modulate_backward(&dm1, &rec.n1, scale1, dm1_shift, dm1_scale);
        let mut dx_in = dx_mid;
        add_into(&mut dx_in, &rms_backward(&dn1, &rec.x_in, &rec.inv1));
        Ok(dx_in)
    }
}
