// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weights and forward pass of the toy vision-language model.
//!
//! Layout of one forward pass:
//!
//! ```text
//! pixels ─ patch embed + pos ─ [vision block]×E ─ rmsnorm ─ b×b mean pool ─ proj
//!                                                                      │
//!   image tokens (bidirectional among themselves) ++ text tokens (causal)
//!                                                                      │
//!   [decoder block]×L: x += attn(rmsnorm(x)); x += mlp(rmsnorm(x))
//!                                                                      │
//!                                       rmsnorm ─ unembed at last position
//! ```
//!
//! Matrices are stored `[d_in, d_out]` so that `y = x · W`.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::data::ImageGrid;
use crate::error::{CloomError, Result};
use crate::numeric::ops::{self, gemm, gemm_strided};
use crate::numeric::{SeededRng, Tensor};

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub(crate) const BLOCK_FIELDS: [&str; 10] = ["ln1", "wq", "wk", "wv", "wo", "ln2", "w1", "b1", "w2", "b2"];

fn normal(rng: &mut SeededRng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), rng.normal_vec(n, std))
}

impl BlockWeights {
    fn init(d: usize, d_mlp: usize, n_layers: usize, rng: &mut SeededRng) -> Self {
        let s_in = 1.0 / (d as f32).sqrt();
        let s_out = s_in / (2.0 * n_layers as f32).sqrt();
        Self {
            ln1: Tensor::filled(&[d], 1.0),
            wq: normal(rng, &[d, d], s_in),
            wk: normal(rng, &[d, d], s_in),
            wv: normal(rng, &[d, d], s_in),
            wo: normal(rng, &[d, d], s_out),
            ln2: Tensor::filled(&[d], 1.0),
            w1: normal(rng, &[d, d_mlp], s_in),
            b1: Tensor::zeros(&[d_mlp]),
            w2: normal(rng, &[d_mlp, d], 1.0 / (d_mlp as f32).sqrt() / (2.0 * n_layers as f32).sqrt()),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn zeros(d: usize, d_mlp: usize) -> Self {
        Self {
            ln1: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln2: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, d_mlp]),
            b1: Tensor::zeros(&[d_mlp]),
            w2: Tensor::zeros(&[d_mlp, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.ln1, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.ln1,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionWeights {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_f: Tensor,
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub vision: VisionWeights,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_f: Tensor,
    pub unembed: Tensor,
}

impl ModelWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let (d, dv) = (cfg.d_model, cfg.d_vision);
        let vision = VisionWeights {
            patch_w: normal(rng, &[3, dv], 1.0),
            patch_b: Tensor::zeros(&[dv]),
            pos: normal(rng, &[cfg.n_patches(), dv], 0.5),
            blocks: (0..cfg.n_encoder_layers)
                .map(|_| BlockWeights::init(dv, cfg.d_vision_mlp, cfg.n_encoder_layers, rng))
                .collect(),
            ln_f: Tensor::filled(&[dv], 1.0),
        };
        Self {
            vision,
            proj_w: normal(rng, &[dv, d], 1.0 / (dv as f32).sqrt()),
            proj_b: Tensor::zeros(&[d]),
            tok_emb: normal(rng, &[cfg.vocab_size, d], 0.5),
            pos_emb: normal(rng, &[cfg.max_seq_len(), d], 0.2),
            blocks: (0..cfg.n_decoder_layers)
                .map(|_| BlockWeights::init(d, cfg.d_mlp, cfg.n_decoder_layers, rng))
                .collect(),
            ln_f: Tensor::filled(&[d], 1.0),
            unembed: normal(rng, &[d, cfg.vocab_size], 1.0 / (d as f32).sqrt()),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, dv) = (cfg.d_model, cfg.d_vision);
        Self {
            vision: VisionWeights {
                patch_w: Tensor::zeros(&[3, dv]),
                patch_b: Tensor::zeros(&[dv]),
                pos: Tensor::zeros(&[cfg.n_patches(), dv]),
                blocks: (0..cfg.n_encoder_layers)
                    .map(|_| BlockWeights::zeros(dv, cfg.d_vision_mlp))
                    .collect(),
                ln_f: Tensor::zeros(&[dv]),
            },
            proj_w: Tensor::zeros(&[dv, d]),
            proj_b: Tensor::zeros(&[d]),
            tok_emb: Tensor::zeros(&[cfg.vocab_size, d]),
            pos_emb: Tensor::zeros(&[cfg.max_seq_len(), d]),
            blocks: (0..cfg.n_decoder_layers)
                .map(|_| BlockWeights::zeros(d, cfg.d_mlp))
                .collect(),
            ln_f: Tensor::zeros(&[d]),
            unembed: Tensor::zeros(&[d, cfg.vocab_size]),
        }
    }

    /// Tensor names in canonical order; matches [`Self::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["vision.patch_w".to_string(), "vision.patch_b".into(), "vision.pos".into()];
        for i in 0..self.vision.blocks.len() {
            out.extend(BLOCK_FIELDS.iter().map(|f| format!("vision.blocks.{i}.{f}")));
        }
        out.extend(["vision.ln_f", "proj.w", "proj.b", "tok_emb", "pos_emb"].map(String::from));
        for i in 0..self.blocks.len() {
            out.extend(BLOCK_FIELDS.iter().map(|f| format!("blocks.{i}.{f}")));
        }
        out.extend(["ln_f", "unembed"].map(String::from));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let v = &self.vision;
        let mut out = vec![&v.patch_w, &v.patch_b, &v.pos];
        for b in &v.blocks {
            out.extend(b.tensors());
        }
        out.extend([&v.ln_f, &self.proj_w, &self.proj_b, &self.tok_emb, &self.pos_emb]);
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.ln_f, &self.unembed]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let v = &mut self.vision;
        let mut out = vec![&mut v.patch_w, &mut v.patch_b, &mut v.pos];
        for b in v.blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.extend([
            &mut v.ln_f,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.tok_emb,
            &mut self.pos_emb,
        ]);
        for b in self.blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.ln_f, &mut self.unembed]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn scale(&mut self, s: f32) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &ModelWeights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn global_norm(&self) -> f32 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt()
    }
}

// ---------------------------------------------------------------------------
// Attention masks
// ---------------------------------------------------------------------------

/// Decoder mask: image positions `[0, n_image)` attend to every image
/// position; text positions attend causally to everything before them.
/// `mask[i * t + j]` is true when query `i` may attend to key `j`.
pub fn decoder_mask(n_image: usize, t: usize) -> Vec<bool> {
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            m[i * t + j] = j <= i || (i < n_image && j < n_image);
        }
    }
    m
}

pub fn full_mask(t: usize) -> Vec<bool> {
    vec![true; t * t]
}

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub t: usize,
    pub d: usize,
    pub heads: usize,
    pub d_mlp: usize,
    pub eps: f32,
}

impl Dims {
    fn dh(&self) -> usize {
        self.d / self.heads
    }
}

/// Intermediate values of one block, kept for backward and for traces.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache {
    pub x_in: Vec<f32>,
    pub n1: Vec<f32>,
    pub den1: Vec<f32>,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    pub att: Vec<f32>,
    pub ctx: Vec<f32>,
    pub x_mid: Vec<f32>,
    pub n2: Vec<f32>,
    pub den2: Vec<f32>,
    pub h_pre: Vec<f32>,
    pub h_act: Vec<f32>,
    pub mlp_out: Vec<f32>,
    pub x_out: Vec<f32>,
}

/// Attention patterns and norm denominators held fixed during a replay.
pub(crate) struct FrozenBlock<'a> {
    pub att: &'a [f32],
    pub den1: &'a [f32],
    pub den2: &'a [f32],
}

pub(crate) fn linear(x: &[f32], rows: usize, w: &Tensor, bias: Option<&Tensor>) -> Vec<f32> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; rows * dout];
    if let Some(b) = bias {
        for r in 0..rows {
            y[r * dout..(r + 1) * dout].copy_from_slice(b.data());
        }
    }
    gemm(rows, din, dout, x, false, w.data(), false, &mut y, bias.is_some());
    y
}

fn norm_rows(x: &[f32], dims: Dims, gain: &Tensor, frozen: Option<&[f32]>) -> (Vec<f32>, Vec<f32>) {
    let d = dims.d;
    let mut out = vec![0.0; x.len()];
    let mut dens = Vec::with_capacity(dims.t);
    for r in 0..dims.t {
        let xr = &x[r * d..(r + 1) * d];
        let or = &mut out[r * d..(r + 1) * d];
        match frozen {
            Some(f) => {
                ops::rmsnorm_row_frozen(xr, gain.data(), f[r], or);
                dens.push(f[r]);
            }
            None => dens.push(ops::rmsnorm_row(xr, gain.data(), dims.eps, or)),
        }
    }
    (out, dens)
}

/// Computes `softmax(q kᵀ / sqrt(dh))` per head under `mask`.
fn attention_patterns(q: &[f32], k: &[f32], dims: Dims, mask: &[bool]) -> Vec<f32> {
    let (t, d, dh) = (dims.t, dims.d, dims.dh());
    let scale = 1.0 / (dh as f32).sqrt();
    let mut att = vec![0.0; dims.heads * t * t];
    for h in 0..dims.heads {
        let s = &mut att[h * t * t..(h + 1) * t * t];
        gemm_strided(t, dh, t, (q, h * dh, d, 1), (k, h * dh, 1, d), s, 0, t, 1, false);
        for i in 0..t {
            let row = &mut s[i * t..(i + 1) * t];
            for (j, v) in row.iter_mut().enumerate() {
                *v = if mask[i * t + j] { *v * scale } else { f32::NEG_INFINITY };
            }
            ops::softmax_in_place(row);
        }
    }
    att
}

/// `ctx[:, head] = att_head · v[:, head]`.
pub(crate) fn mix_values(att: &[f32], v: &[f32], dims: Dims) -> Vec<f32> {
    let (t, d, dh) = (dims.t, dims.d, dims.dh());
    let mut ctx = vec![0.0; t * d];
    for h in 0..dims.heads {
        gemm_strided(t, t, dh, (att, h * t * t, t, 1), (v, h * dh, d, 1), &mut ctx, h * dh, d, 1, false);
    }
    ctx
}

/// MLP sublayer on already-normalized input rows.
pub(crate) fn mlp_forward(bw: &BlockWeights, n2: &[f32], rows: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let h_pre = linear(n2, rows, &bw.w1, Some(&bw.b1));
    let h_act: Vec<f32> = h_pre.iter().map(|&v| ops::gelu(v)).collect();
    let out = linear(&h_act, rows, &bw.w2, Some(&bw.b2));
    (h_pre, h_act, out)
}

/// Hook run after the MLP of decoder layer `layer`; may rewrite `mlp_out`.
pub trait MlpHook {
    fn after_mlp(&mut self, layer: usize, mlp_in: &[f32], mlp_out: &mut [f32]) -> Result<()>;
}

pub(crate) fn block_forward(
    bw: &BlockWeights,
    dims: Dims,
    x: &[f32],
    mask: &[bool],
    frozen: Option<&FrozenBlock<'_>>,
    hook: Option<&mut dyn MlpHook>,
    layer: usize,
) -> Result<BlockCache> {
    let t = dims.t;
    let (n1, den1) = norm_rows(x, dims, &bw.ln1, frozen.map(|f| f.den1));
    let q = linear(&n1, t, &bw.wq, None);
    let k = linear(&n1, t, &bw.wk, None);
    let v = linear(&n1, t, &bw.wv, None);
    let att = match frozen {
        Some(f) => f.att.to_vec(),
        None => attention_patterns(&q, &k, dims, mask),
    };
    let ctx = mix_values(&att, &v, dims);
    let attn_out = linear(&ctx, t, &bw.wo, None);
    let x_mid: Vec<f32> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
    let (n2, den2) = norm_rows(&x_mid, dims, &bw.ln2, frozen.map(|f| f.den2));
    let (h_pre, h_act, mut mlp_out) = mlp_forward(bw, &n2, t);
    if let Some(h) = hook {
        h.after_mlp(layer, &n2, &mut mlp_out)?;
    }
    let x_out: Vec<f32> = x_mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();
    Ok(BlockCache {
        x_in: x.to_vec(),
        n1,
        den1,
        q,
        k,
        v,
        att,
        ctx,
        x_mid,
        n2,
        den2,
        h_pre,
        h_act,
        mlp_out,
        x_out,
    })
}

// ---------------------------------------------------------------------------
// Vision tower
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub(crate) struct VisionCache {
    pub blocks: Vec<BlockCache>,
    pub x_final: Vec<f32>,
    pub den_f: Vec<f32>,
    pub pooled: Vec<f32>,
    pub img_emb: Vec<f32>,
}

/// Mean pool of `b × b` blocks over a `gh × gw` token grid.
pub(crate) fn pool_blocks(x: &[f32], gh: usize, gw: usize, b: usize, dim: usize) -> Vec<f32> {
    let (ph, pw) = (gh / b, gw / b);
    let mut out = vec![0.0; ph * pw * dim];
    let inv = 1.0 / (b * b) as f32;
    for y in 0..gh {
        for xx in 0..gw {
            let dst = ((y / b) * pw + xx / b) * dim;
            let src = (y * gw + xx) * dim;
            for c in 0..dim {
                out[dst + c] += x[src + c] * inv;
            }
        }
    }
    out
}

fn vision_forward(cfg: &ModelConfig, w: &VisionWeights, proj_w: &Tensor, proj_b: &Tensor, image: &ImageGrid) -> Result<VisionCache> {
    let (gh, gw) = cfg.patch_grid;
    let p = cfg.n_patches();
    let dv = cfg.d_vision;
    let mut x = linear(&image.data, p, &w.patch_w, Some(&w.patch_b));
    for (xi, pi) in x.iter_mut().zip(w.pos.data()) {
        *xi += pi;
    }
    let dims = Dims {
        t: p,
        d: dv,
        heads: cfg.n_vision_heads,
        d_mlp: cfg.d_vision_mlp,
        eps: cfg.norm_eps,
    };
    let mask = full_mask(p);
    let mut blocks = Vec::with_capacity(w.blocks.len());
    for bw in &w.blocks {
        let c = block_forward(bw, dims, &x, &mask, None, None, 0)?;
        x = c.x_out.clone();
        blocks.push(c);
    }
    let (normed, den_f) = norm_rows(&x, dims, &w.ln_f, None);
    let pooled = pool_blocks(&normed, gh, gw, cfg.pool_block, dv);
    let img_emb = linear(&pooled, cfg.n_image_tokens, proj_w, Some(proj_b));
    Ok(VisionCache {
        blocks,
        x_final: x,
        den_f,
        pooled,
        img_emb,
    })
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

/// Configuration plus weights. Immutable during analysis; forward passes are
/// reentrant.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

/// Everything computed by one forward pass (internal representation).
#[derive(Debug, Clone)]
pub(crate) struct ForwardState {
    pub vision: VisionCache,
    pub embeddings: Vec<f32>,
    pub blocks: Vec<BlockCache>,
    pub final_normed: Vec<f32>,
    pub den_f: f32,
    pub logits: Vec<f32>,
    pub n_image: usize,
    pub tokens: Vec<usize>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::init(&config, &mut SeededRng::new(seed));
        Ok(Self { config, weights })
    }

    pub(crate) fn dims(&self, t: usize) -> Dims {
        Dims {
            t,
            d: self.config.d_model,
            heads: self.config.n_heads,
            d_mlp: self.config.d_mlp,
            eps: self.config.norm_eps,
        }
    }

    pub fn validate_input(&self, image: &ImageGrid, tokens: &[usize]) -> Result<()> {
        let (gh, gw) = self.config.patch_grid;
        if image.h != gh || image.w != gw {
            return Err(CloomError::shape(
                "forward",
                format!("image is {}x{}, model expects {gh}x{gw}", image.h, image.w),
            ));
        }
        image.validate()?;
        if tokens.is_empty() {
            return Err(CloomError::InvalidArgument("prompt is empty".into()));
        }
        if tokens.len() > self.config.max_text_len {
            return Err(CloomError::InvalidArgument(format!(
                "prompt has {} tokens, maximum is {}",
                tokens.len(),
                self.config.max_text_len
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(CloomError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Decoder input rows: projected image tokens then text embeddings, each
    /// plus its position embedding.
    pub(crate) fn embed(&self, img_emb: &[f32], tokens: &[usize]) -> Vec<f32> {
        let d = self.config.d_model;
        let n_img = self.config.n_image_tokens;
        let t = n_img + tokens.len();
        let mut x = vec![0.0; t * d];
        x[..n_img * d].copy_from_slice(img_emb);
        for (i, &tok) in tokens.iter().enumerate() {
            x[(n_img + i) * d..(n_img + i + 1) * d].copy_from_slice(self.weights.tok_emb.row(tok));
        }
        for (xi, pi) in x.iter_mut().zip(self.weights.pos_emb.data()) {
            *xi += pi;
        }
        x
    }

    pub(crate) fn forward_state(&self, image: &ImageGrid, tokens: &[usize], mut hook: Option<&mut dyn MlpHook>) -> Result<ForwardState> {
        self.validate_input(image, tokens)?;
        let w = &self.weights;
        let vision = vision_forward(&self.config, &w.vision, &w.proj_w, &w.proj_b, image)?;
        let embeddings = self.embed(&vision.img_emb, tokens);
        let h: Option<&mut dyn MlpHook> = match hook.as_mut() {
            Some(h) => Some(&mut **h),
            None => None,
        };
        self.decode_from(vision, embeddings, tokens, h)
    }

    pub(crate) fn decode_from(
        &self,
        vision: VisionCache,
        embeddings: Vec<f32>,
        tokens: &[usize],
        mut hook: Option<&mut dyn MlpHook>,
    ) -> Result<ForwardState> {
        let n_img = self.config.n_image_tokens;
        let t = n_img + tokens.len();
        let dims = self.dims(t);
        let mask = decoder_mask(n_img, t);
        let mut x = embeddings.clone();
        let mut blocks = Vec::with_capacity(self.weights.blocks.len());
        for (l, bw) in self.weights.blocks.iter().enumerate() {
            let h: Option<&mut dyn MlpHook> = match hook.as_mut() {
                Some(h) => Some(&mut **h),
                None => None,
            };
            let c = block_forward(bw, dims, &x, &mask, None, h, l)?;
            x = c.x_out.clone();
            blocks.push(c);
        }
        let (final_normed, den_f, logits) = self.unembed_last(&x, t, None);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(CloomError::NonFinite("forward logits"));
        }
        Ok(ForwardState {
            vision,
            embeddings,
            blocks,
            final_normed,
            den_f,
            logits,
            n_image: n_img,
            tokens: tokens.to_vec(),
        })
    }

    /// Final norm and unembedding at the last position.
    pub(crate) fn unembed_last(&self, x: &[f32], t: usize, frozen_den: Option<f32>) -> (Vec<f32>, f32, Vec<f32>) {
        let d = self.config.d_model;
        let last = &x[(t - 1) * d..t * d];
        let mut normed = vec![0.0; d];
        let den = match frozen_den {
            Some(den) => {
                ops::rmsnorm_row_frozen(last, self.weights.ln_f.data(), den, &mut normed);
                den
            }
            None => ops::rmsnorm_row(last, self.weights.ln_f.data(), self.config.norm_eps, &mut normed),
        };
        let logits = linear(&normed, 1, &self.weights.unembed, None);
        (normed, den, logits)
    }

    /// Logits at the final position, plus the activation trace when `cache`.
    pub fn forward(&self, image: &ImageGrid, tokens: &[usize], cache: bool) -> Result<(Vec<f32>, Option<ActivationTrace>)> {
        let st = self.forward_state(image, tokens, None)?;
        let trace = cache.then(|| ActivationTrace::from_state(&self.config, &st));
        Ok((st.logits, trace))
    }

    /// Forward with an MLP hook; always returns the trace.
    pub fn forward_hooked(&self, image: &ImageGrid, tokens: &[usize], hook: &mut dyn MlpHook) -> Result<(Vec<f32>, ActivationTrace)> {
        let st = self.forward_state(image, tokens, Some(hook))?;
        let trace = ActivationTrace::from_state(&self.config, &st);
        Ok((st.logits, trace))
    }

    /// Re-runs the decoder from the trace's embeddings with every attention
    /// pattern and norm denominator taken from the trace. MLPs are recomputed
    /// live from their (frozen-denominator) inputs.
    pub fn replay_frozen(&self, trace: &ActivationTrace) -> Result<Vec<f32>> {
        Ok(self.replay_frozen_hooked(trace, None)?.0)
    }

    /// [`Model::replay_frozen`] with an MLP hook; returns logits and the
    /// residual stream entering each MLP.
    pub(crate) fn replay_frozen_hooked(
        &self,
        trace: &ActivationTrace,
        mut hook: Option<&mut dyn MlpHook>,
    ) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        let t = trace.seq_len;
        let dims = self.dims(t);
        let mask = decoder_mask(trace.n_image, t);
        let mut x = trace.embeddings.data().to_vec();
        let mut mlp_in = Vec::with_capacity(trace.layers.len());
        for (l, (bw, lt)) in self.weights.blocks.iter().zip(&trace.layers).enumerate() {
            let frozen = FrozenBlock {
                att: lt.attn.data(),
                den1: lt.den_attn.data(),
                den2: lt.den_mlp.data(),
            };
            let h: Option<&mut dyn MlpHook> = match hook.as_mut() {
                Some(h) => Some(&mut **h),
                None => None,
            };
            let c = block_forward(bw, dims, &x, &mask, Some(&frozen), h, l)?;
            mlp_in.push(c.n2);
            x = c.x_out;
        }
        let (_, _, logits) = self.unembed_last(&x, t, Some(trace.den_final));
        Ok((logits, mlp_in))
    }

    pub fn predict(&self, image: &ImageGrid, tokens: &[usize]) -> Result<usize> {
        let (logits, _) = self.forward(image, tokens, false)?;
        Ok(argmax(&logits))
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(v: &[f32]) -> Vec<f32> {
    let mut p = v.to_vec();
    ops::softmax_in_place(&mut p);
    p
}

// ---------------------------------------------------------------------------
// Activation trace
// ---------------------------------------------------------------------------

/// Cached activations of one decoder layer. Row `p` of each `[T, d]` tensor
/// is sequence position `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub resid_in: Tensor,
    pub resid_mid: Tensor,
    pub mlp_in: Tensor,
    pub mlp_out: Tensor,
    /// `[heads, T, T]`.
    pub attn: Tensor,
    pub den_attn: Tensor,
    pub den_mlp: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionTrace {
    /// Per encoder layer, `[heads, P, P]`.
    pub attn: Vec<Tensor>,
    pub grid: (usize, usize),
    pub pool_block: usize,
    /// Number of leading non-patch tokens (class tokens). Zero for this model.
    pub n_prefix: usize,
}

/// Per-prompt cache of everything attribution and rollout need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub tokens: Vec<usize>,
    pub n_image: usize,
    pub seq_len: usize,
    /// Decoder input `[T, d]`.
    pub embeddings: Tensor,
    pub layers: Vec<LayerTrace>,
    pub resid_final: Tensor,
    pub den_final: f32,
    pub logits: Vec<f32>,
    pub vision: VisionTrace,
}

impl ActivationTrace {
    pub(crate) fn from_state(cfg: &ModelConfig, st: &ForwardState) -> Self {
        let d = cfg.d_model;
        let t = st.n_image + st.tokens.len();
        let td = |v: &Vec<f32>| Tensor::from_parts(vec![t, d], v.clone());
        let layers = st
            .blocks
            .iter()
            .map(|c| LayerTrace {
                resid_in: td(&c.x_in),
                resid_mid: td(&c.x_mid),
                mlp_in: td(&c.n2),
                mlp_out: td(&c.mlp_out),
                attn: Tensor::from_parts(vec![cfg.n_heads, t, t], c.att.clone()),
                den_attn: Tensor::from_parts(vec![t], c.den1.clone()),
                den_mlp: Tensor::from_parts(vec![t], c.den2.clone()),
            })
            .collect();
        let p = cfg.n_patches();
        let vision = VisionTrace {
            attn: st
                .vision
                .blocks
                .iter()
                .map(|c| Tensor::from_parts(vec![cfg.n_vision_heads, p, p], c.att.clone()))
                .collect(),
            grid: cfg.patch_grid,
            pool_block: cfg.pool_block,
            n_prefix: 0,
        };
        let resid_final = st.blocks.last().map(|c| td(&c.x_out)).unwrap_or_else(|| td(&st.embeddings));
        Self {
            tokens: st.tokens.clone(),
            n_image: st.n_image,
            seq_len: t,
            embeddings: td(&st.embeddings),
            layers,
            resid_final,
            den_final: st.den_f,
            logits: st.logits.clone(),
            vision,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn last_pos(&self) -> usize {
        self.seq_len - 1
    }

    pub fn is_image_pos(&self, pos: usize) -> bool {
        pos < self.n_image
    }

    pub fn probs(&self) -> Vec<f32> {
        softmax(&self.logits)
    }

    /// Checks that every cached field needed for linearization is present and
    /// consistently shaped.
    pub fn check_complete(&self, d_model: usize) -> Result<()> {
        let t = self.seq_len;
        if self.embeddings.shape() != [t, d_model] {
            return Err(CloomError::IncompleteTrace("embeddings missing or misshapen".into()));
        }
        if self.layers.is_empty() {
            return Err(CloomError::IncompleteTrace("no decoder layers cached".into()));
        }
        for (l, lt) in self.layers.iter().enumerate() {
            let ok = lt.mlp_in.shape() == [t, d_model]
                && lt.mlp_out.shape() == [t, d_model]
                && lt.resid_in.shape() == [t, d_model]
                && lt.attn.len() % (t * t) == 0
                && !lt.attn.is_empty()
                && lt.den_attn.len() == t
                && lt.den_mlp.len() == t;
            if !ok {
                return Err(CloomError::IncompleteTrace(format!("layer {l} cache incomplete")));
            }
        }
        if !(self.den_final.is_finite() && self.den_final > 0.0) {
            return Err(CloomError::IncompleteTrace("final norm denominator missing".into()));
        }
        Ok(())
    }
}
