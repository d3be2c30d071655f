// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer TopK transcoders that stand in for the decoder MLPs.
//!
//! A transcoder reads the normalized MLP input `x` and predicts the MLP output:
//! `z = TopK(ReLU(W_enc x + b_enc), k)` and `TC(x) = W_dec z + b_dec`.
//! What it misses is kept as an explicit error vector so that the replacement
//! model reproduces the original forward pass exactly.

mod bank;
mod replace;
mod train;

pub use bank::{load_bank, save_bank, BankMeta, LayerStats, StatPoint, TranscoderBank, BANK_KIND};
pub use replace::{replacement_forward, ErrorRecord, ReplacementOutput};
pub(crate) use replace::{run_replacement, run_replacement_frozen, LatentEdit};
pub use train::{
    dead_latent_fraction, evaluate_bank, harvest_pairs, scaled_learning_rate, train_bank, LatentHistory, LayerPairs,
    TcTrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{CloomError, Result};
use crate::numeric::ops::{self, rank_desc};
use crate::numeric::{SeededRng, Tensor};

/// Active latents of one token, sorted by latent index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    pub indices: Vec<usize>,
    pub values: Vec<f32>,
}

impl SparseCode {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn get(&self, i: usize) -> f32 {
        match self.indices.binary_search(&i) {
            Ok(p) => self.values[p],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self, d_feat: usize) -> Vec<f32> {
        let mut out = vec![0.0; d_feat];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    pub fn from_dense(z: &[f32]) -> Self {
        let mut code = Self::default();
        for (i, &v) in z.iter().enumerate() {
            if v != 0.0 {
                code.indices.push(i);
                code.values.push(v);
            }
        }
        code
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcoder {
    pub layer: usize,
    pub k: usize,
    /// `[d_feat, d_model]`.
    pub w_enc: Tensor,
    /// `[d_feat]`.
    pub b_enc: Tensor,
    /// `[d_model, d_feat]`; column `i` is the decoder vector of latent `i`.
    pub w_dec: Tensor,
    /// `[d_model]`.
    pub b_dec: Tensor,
}

impl Transcoder {
    pub fn zeros(layer: usize, d_model: usize, d_feat: usize, k: usize) -> Self {
        Self {
            layer,
            k,
            w_enc: Tensor::zeros(&[d_feat, d_model]),
            b_enc: Tensor::zeros(&[d_feat]),
            w_dec: Tensor::zeros(&[d_model, d_feat]),
            b_dec: Tensor::zeros(&[d_model]),
        }
    }

    /// Random unit-norm decoder columns with the encoder initialized to their
    /// transpose.
    pub fn init(layer: usize, d_model: usize, d_feat: usize, k: usize, rng: &mut SeededRng) -> Self {
        let mut tc = Self::zeros(layer, d_model, d_feat, k);
        for i in 0..d_feat {
            let v = rng.normal_vec(d_model, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
            for (j, x) in v.iter().enumerate() {
                let u = x / norm;
                tc.w_dec.data_mut()[j * d_feat + i] = u;
                tc.w_enc.data_mut()[i * d_model + j] = u;
            }
        }
        tc
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.shape()[1]
    }

    pub fn d_feat(&self) -> usize {
        self.w_enc.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (f, d) = (self.d_feat(), self.d_model());
        if self.w_dec.shape() != [d, f] || self.b_enc.shape() != [f] || self.b_dec.shape() != [d] {
            return Err(CloomError::shape(
                "transcoder",
                format!(
                    "w_enc {:?}, b_enc {:?}, w_dec {:?}, b_dec {:?}",
                    self.w_enc.shape(),
                    self.b_enc.shape(),
                    self.w_dec.shape(),
                    self.b_dec.shape()
                ),
            ));
        }
        if f < d {
            return Err(CloomError::InvalidArgument(format!(
                "transcoder must be overcomplete: d_feat {f} < d_model {d}"
            )));
        }
        if self.k == 0 || self.k > f {
            return Err(CloomError::InvalidArgument(format!("k = {} outside 1..={f}", self.k)));
        }
        Ok(())
    }

    /// Encoder row of latent `i`.
    pub fn encoder_row(&self, i: usize) -> &[f32] {
        self.w_enc.row(i)
    }

    /// Decoder column of latent `i`.
    pub fn decoder_vector(&self, i: usize) -> Vec<f32> {
        let f = self.d_feat();
        (0..self.d_model()).map(|j| self.w_dec.data()[j * f + i]).collect()
    }

    /// `W_enc x + b_enc`.
    pub fn preactivations(&self, x: &[f32]) -> Vec<f32> {
        let mut pre = self.b_enc.data().to_vec();
        let d = self.d_model();
        for (i, p) in pre.iter_mut().enumerate() {
            *p += ops::dot(&self.w_enc.data()[i * d..(i + 1) * d], x);
        }
        pre
    }

    pub fn encode(&self, x: &[f32]) -> Result<SparseCode> {
        if x.len() != self.d_model() {
            return Err(CloomError::shape(
                "encode",
                format!("input of length {}, d_model {}", x.len(), self.d_model()),
            ));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CloomError::NonFinite("transcoder input"));
        }
        Ok(topk_relu(&self.preactivations(x), self.k))
    }

    /// `W_dec z + b_dec`.
    pub fn decode(&self, z: &SparseCode) -> Vec<f32> {
        let f = self.d_feat();
        let mut y = self.b_dec.data().to_vec();
        for (&i, &v) in z.indices.iter().zip(&z.values) {
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += v * self.w_dec.data()[j * f + i];
            }
        }
        y
    }

    pub fn decode_dense(&self, z: &[f32]) -> Result<Vec<f32>> {
        if z.len() != self.d_feat() {
            return Err(CloomError::shape(
                "decode",
                format!("code of length {}, d_feat {}", z.len(), self.d_feat()),
            ));
        }
        Ok(self.decode(&SparseCode::from_dense(z)))
    }

    /// Encodes each row of a `[n, d_model]` batch. Returns the codes and the
    /// dense pre-activations `[n, d_feat]`.
    pub(crate) fn encode_batch(&self, x: &[f32], n: usize) -> (Vec<SparseCode>, Vec<f32>) {
        let (f, d) = (self.d_feat(), self.d_model());
        let mut pre = vec![0.0; n * f];
        ops::gemm(n, d, f, x, false, self.w_enc.data(), true, &mut pre, false);
        for r in 0..n {
            for (p, b) in pre[r * f..(r + 1) * f].iter_mut().zip(self.b_enc.data()) {
                *p += b;
            }
        }
        let codes = (0..n).map(|r| topk_relu(&pre[r * f..(r + 1) * f], self.k)).collect();
        (codes, pre)
    }

    /// `TC(x)` for a `[n, d_model]` batch.
    pub fn reconstruct_batch(&self, x: &[f32], n: usize) -> Vec<f32> {
        let d = self.d_model();
        let (codes, _) = self.encode_batch(x, n);
        let mut out = Vec::with_capacity(n * d);
        for c in &codes {
            out.extend(self.decode(c));
        }
        out
    }
}

/// `TopK(ReLU(pre), k)` with ties to the lower index.
pub fn topk_relu(pre: &[f32], k: usize) -> SparseCode {
    let mut cand: Vec<(usize, f32)> = pre
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, v)| v > 0.0)
        .collect();
    if cand.len() > k {
        if k == 0 {
            cand.clear();
        } else {
            cand.select_nth_unstable_by(k - 1, |a, b| rank_desc(*a, *b));
            cand.truncate(k);
        }
    }
    cand.sort_by_key(|c| c.0);
    SparseCode {
        indices: cand.iter().map(|c| c.0).collect(),
        values: cand.iter().map(|c| c.1).collect(),
    }
}

/// Fraction of variance unexplained: `Σ‖y − ŷ‖² / Σ‖y − ȳ‖²` over `n` rows
/// of width `dim`, with `ȳ` the mean row of `y_true`.
pub fn fvu(y_true: &[f32], y_pred: &[f32], dim: usize) -> Result<f32> {
    if dim == 0 || y_true.len() != y_pred.len() || y_true.len() % dim != 0 {
        return Err(CloomError::shape(
            "fvu",
            format!("lengths {} and {} with row width {dim}", y_true.len(), y_pred.len()),
        ));
    }
    let n = y_true.len() / dim;
    if n < 2 {
        return Err(CloomError::InvalidArgument("fvu needs a batch of at least 2".into()));
    }
    let mut mean = vec![0.0f64; dim];
    for row in y_true.chunks(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let (mut sse, mut sst) = (0.0f64, 0.0f64);
    for (rt, rp) in y_true.chunks(dim).zip(y_pred.chunks(dim)) {
        for j in 0..dim {
            sse += (rt[j] as f64 - rp[j] as f64).powi(2);
            sst += (rt[j] as f64 - mean[j]).powi(2);
        }
    }
    if sst == 0.0 {
        return Err(CloomError::InvalidArgument("fvu undefined: targets have zero variance".into()));
    }
    Ok((sse / sst) as f32)
}
