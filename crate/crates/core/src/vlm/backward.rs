// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-written backward pass for the answer-token cross-entropy loss.

use super::model::{BlockCache, BlockWeights, Dims, ForwardState, Model, ModelWeights};
use crate::numeric::ops::{self, gemm, gemm_strided};
use crate::numeric::Tensor;

fn add_rows_sum(dst: &mut Tensor, src: &[f32], rows: usize) {
    let c = dst.len();
    let d = dst.data_mut();
    for r in 0..rows {
        for (a, b) in d.iter_mut().zip(&src[r * c..(r + 1) * c]) {
            *a += b;
        }
    }
}

/// `dW += xᵀ · dy` for `x: [rows, din]`, `dy: [rows, dout]`.
fn acc_weight_grad(dw: &mut Tensor, x: &[f32], dy: &[f32], rows: usize) {
    let (din, dout) = (dw.shape()[0], dw.shape()[1]);
    gemm(din, rows, dout, x, true, dy, false, dw.data_mut(), true);
}

/// `dx (+)= dy · Wᵀ`.
fn input_grad(dx: &mut [f32], dy: &[f32], w: &Tensor, rows: usize, accumulate: bool) {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    gemm(rows, dout, din, dy, false, w.data(), true, dx, accumulate);
}

fn norm_backward(x: &[f32], gain: &Tensor, dens: &[f32], dy: &[f32], d: usize, dx: &mut [f32], dgain: &mut Tensor) {
    let dg = dgain.data_mut();
    for (r, &den) in dens.iter().enumerate() {
        let s = r * d..(r + 1) * d;
        ops::rmsnorm_backward_row(&x[s.clone()], gain.data(), den, &dy[s.clone()], &mut dx[s], dg);
    }
}

/// Backward through one block; returns `d x_in`.
pub(crate) fn block_backward(bw: &BlockWeights, g: &mut BlockWeights, c: &BlockCache, dims: Dims, dx_out: &[f32]) -> Vec<f32> {
    let (t, d, dm, heads) = (dims.t, dims.d, dims.d_mlp, dims.heads);
    let dh = d / heads;

    // MLP
    acc_weight_grad(&mut g.w2, &c.h_act, dx_out, t);
    add_rows_sum(&mut g.b2, dx_out, t);
    let mut dh_act = vec![0.0; t * dm];
    input_grad(&mut dh_act, dx_out, &bw.w2, t, false);
    for (v, &pre) in dh_act.iter_mut().zip(&c.h_pre) {
        *v *= ops::gelu_grad(pre);
    }
    acc_weight_grad(&mut g.w1, &c.n2, &dh_act, t);
    add_rows_sum(&mut g.b1, &dh_act, t);
    let mut dn2 = vec![0.0; t * d];
    input_grad(&mut dn2, &dh_act, &bw.w1, t, false);
    let mut d_mid = dx_out.to_vec();
    norm_backward(&c.x_mid, &bw.ln2, &c.den2, &dn2, d, &mut d_mid, &mut g.ln2);

    // attention output projection
    acc_weight_grad(&mut g.wo, &c.ctx, &d_mid, t);
    let mut dctx = vec![0.0; t * d];
    input_grad(&mut dctx, &d_mid, &bw.wo, t, false);

    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut datt = vec![0.0; t * t];
    let mut ds = vec![0.0; t * t];
    for h in 0..heads {
        let att = &c.att[h * t * t..(h + 1) * t * t];
        // d att = dctx_h · v_hᵀ
        gemm_strided(t, dh, t, (&dctx, h * dh, d, 1), (&c.v, h * dh, 1, d), &mut datt, 0, t, 1, false);
        // d v_h = att_hᵀ · dctx_h
        gemm_strided(t, t, dh, (att, 0, 1, t), (&dctx, h * dh, d, 1), &mut dv, h * dh, d, 1, false);
        for i in 0..t {
            let r = i * t..(i + 1) * t;
            ops::softmax_backward(&att[r.clone()], &datt[r.clone()], &mut ds[r]);
        }
        ds.iter_mut().for_each(|v| *v *= scale);
        gemm_strided(t, t, dh, (&ds, 0, t, 1), (&c.k, h * dh, d, 1), &mut dq, h * dh, d, 1, false);
        gemm_strided(t, t, dh, (&ds, 0, 1, t), (&c.q, h * dh, d, 1), &mut dk, h * dh, d, 1, false);
    }
    acc_weight_grad(&mut g.wq, &c.n1, &dq, t);
    acc_weight_grad(&mut g.wk, &c.n1, &dk, t);
    acc_weight_grad(&mut g.wv, &c.n1, &dv, t);
    let mut dn1 = vec![0.0; t * d];
    input_grad(&mut dn1, &dq, &bw.wq, t, false);
    input_grad(&mut dn1, &dk, &bw.wk, t, true);
    input_grad(&mut dn1, &dv, &bw.wv, t, true);
    let mut dx_in = d_mid;
    norm_backward(&c.x_in, &bw.ln1, &c.den1, &dn1, d, &mut dx_in, &mut g.ln1);
    dx_in
}

/// Cross-entropy of the answer token at the last position. Accumulates
/// parameter gradients into `grads` and returns the loss.
pub(crate) fn loss_and_backward(model: &Model, st: &ForwardState, pixels: &[f32], answer: usize, grads: &mut ModelWeights) -> f32 {
    let cfg = &model.config;
    let w = &model.weights;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let t = st.n_image + st.tokens.len();

    let probs = super::model::softmax(&st.logits);
    let loss = -(probs[answer].max(1e-30)).ln();
    let mut dlogits = probs;
    dlogits[answer] -= 1.0;

    // unembed and final norm at last position
    gemm(d, 1, v, &st.final_normed, true, &dlogits, false, grads.unembed.data_mut(), true);
    let mut dnorm = vec![0.0; d];
    gemm(1, v, d, &dlogits, false, w.unembed.data(), true, &mut dnorm, false);
    let x_last_all = &st.blocks.last().expect("at least one layer").x_out;
    let x_last = &x_last_all[(t - 1) * d..t * d];
    let mut dx = vec![0.0; t * d];
    ops::rmsnorm_backward_row(
        x_last,
        w.ln_f.data(),
        st.den_f,
        &dnorm,
        &mut dx[(t - 1) * d..t * d],
        grads.ln_f.data_mut(),
    );

    let dims = model.dims(t);
    for l in (0..w.blocks.len()).rev() {
        dx = block_backward(&w.blocks[l], &mut grads.blocks[l], &st.blocks[l], dims, &dx);
    }

    // embeddings
    for (g, dv_) in grads.pos_emb.data_mut().iter_mut().zip(&dx) {
        *g += dv_;
    }
    let n_img = st.n_image;
    for (i, &tok) in st.tokens.iter().enumerate() {
        let src = &dx[(n_img + i) * d..(n_img + i + 1) * d];
        for (g, s) in grads.tok_emb.row_mut(tok).iter_mut().zip(src) {
            *g += s;
        }
    }
    let d_img = &dx[..n_img * d];
    acc_weight_grad(&mut grads.proj_w, &st.vision.pooled, d_img, n_img);
    add_rows_sum(&mut grads.proj_b, d_img, n_img);
    let dv_dim = cfg.d_vision;
    let mut dpooled = vec![0.0; n_img * dv_dim];
    input_grad(&mut dpooled, d_img, &w.proj_w, n_img, false);

    // unpool
    let (gh, gw) = cfg.patch_grid;
    let b = cfg.pool_block;
    let pw = gw / b;
    let inv = 1.0 / (b * b) as f32;
    let p = cfg.n_patches();
    let mut dnormed = vec![0.0; p * dv_dim];
    for y in 0..gh {
        for x in 0..gw {
            let src = ((y / b) * pw + x / b) * dv_dim;
            let dst = (y * gw + x) * dv_dim;
            for c in 0..dv_dim {
                dnormed[dst + c] = dpooled[src + c] * inv;
            }
        }
    }
    let mut dxv = vec![0.0; p * dv_dim];
    let vc = &st.vision;
    norm_backward(&vc.x_final, &w.vision.ln_f, &vc.den_f, &dnormed, dv_dim, &mut dxv, &mut grads.vision.ln_f);
    let vdims = Dims {
        t: p,
        d: dv_dim,
        heads: cfg.n_vision_heads,
        d_mlp: cfg.d_vision_mlp,
        eps: cfg.norm_eps,
    };
    for l in (0..w.vision.blocks.len()).rev() {
        dxv = block_backward(&w.vision.blocks[l], &mut grads.vision.blocks[l], &vc.blocks[l], vdims, &dxv);
    }
    for (g, s) in grads.vision.pos.data_mut().iter_mut().zip(&dxv) {
        *g += s;
    }
    acc_weight_grad(&mut grads.vision.patch_w, pixels, &dxv, p);
    add_rows_sum(&mut grads.vision.patch_b, &dxv, p);
    loss
}
