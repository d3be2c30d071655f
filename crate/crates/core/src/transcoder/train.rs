// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use tracing::info;

use super::bank::{BankMeta, LayerStats, StatPoint, TranscoderBank};
use super::{fvu, Transcoder};
use crate::error::{CloomError, Result};
use crate::numeric::{adamw_step, OptimizerConfig, OptimizerState, SeededRng, Tensor};
use crate::vlm::{ModelCheckpoint, SyntheticSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcTrainConfig {
    pub k: usize,
    /// `d_feat = expansion × d_model`.
    pub expansion: usize,
    pub steps: usize,
    pub batch_tokens: usize,
    pub warmup_steps: u64,
    /// Base rate; `None` uses [`scaled_learning_rate`].
    pub lr: Option<f32>,
    pub eval_every: usize,
    pub dead_window: usize,
    pub dead_threshold: f32,
    /// Harvest training pairs from text positions only.
    pub text_only: bool,
    /// Cap on the number of training samples whose traces are harvested.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for TcTrainConfig {
    fn default() -> Self {
        Self {
            k: 8,
            expansion: 8,
            steps: 1500,
            batch_tokens: 4096,
            warmup_steps: 100,
            lr: None,
            eval_every: 100,
            dead_window: 100_000,
            dead_threshold: 1e-6,
            text_only: false,
            max_samples: 2000,
            seed: 0,
        }
    }
}

/// `2e-4 × sqrt(2^14 / (n_latents × d_model))`.
pub fn scaled_learning_rate(n_latents: usize, d_model: usize) -> f64 {
    2e-4 * (16384.0 / (n_latents as f64 * d_model as f64)).sqrt()
}

/// `(MLP input, MLP output)` rows of one decoder layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerPairs {
    pub d_model: usize,
    pub inputs: Vec<f32>,
    pub outputs: Vec<f32>,
    pub is_image: Vec<bool>,
}

impl LayerPairs {
    pub fn n_rows(&self) -> usize {
        self.is_image.len()
    }

    /// Rows whose image flag equals `image`, or all rows for `None`.
    pub fn subset(&self, image: Option<bool>) -> LayerPairs {
        let d = self.d_model;
        let mut out = LayerPairs {
            d_model: d,
            ..Default::default()
        };
        for (r, &img) in self.is_image.iter().enumerate() {
            if image.map_or(true, |want| want == img) {
                out.inputs.extend_from_slice(&self.inputs[r * d..(r + 1) * d]);
                out.outputs.extend_from_slice(&self.outputs[r * d..(r + 1) * d]);
                out.is_image.push(img);
            }
        }
        out
    }
}

/// Runs the model over `samples` and collects per-layer MLP pairs at every
/// position (text positions only when `text_only`).
pub fn harvest_pairs(ck: &ModelCheckpoint, samples: &[SyntheticSample], text_only: bool) -> Result<Vec<LayerPairs>> {
    let cfg = ck.config();
    let d = cfg.d_model;
    let mut out: Vec<LayerPairs> = (0..cfg.n_decoder_layers)
        .map(|_| LayerPairs {
            d_model: d,
            ..Default::default()
        })
        .collect();
    for s in samples {
        let (_, trace) = ck.model.forward(&s.image, &s.prompt, true)?;
        let trace = trace.expect("trace requested");
        for (lp, lt) in out.iter_mut().zip(&trace.layers) {
            for p in 0..trace.seq_len {
                let img = trace.is_image_pos(p);
                if text_only && img {
                    continue;
                }
                lp.inputs.extend_from_slice(lt.mlp_in.row(p));
                lp.outputs.extend_from_slice(lt.mlp_out.row(p));
                lp.is_image.push(img);
            }
        }
    }
    Ok(out)
}

/// Rolling record of per-latent maximum activation, one chunk per step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentHistory {
    d_feat: usize,
    retain_tokens: usize,
    chunks: VecDeque<(usize, Vec<f32>)>,
    covered: usize,
}

impl LatentHistory {
    /// Keeps at least the most recent `retain_tokens` tokens of history.
    pub fn new(d_feat: usize, retain_tokens: usize) -> Self {
        Self {
            d_feat,
            retain_tokens,
            chunks: VecDeque::new(),
            covered: 0,
        }
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn covered_tokens(&self) -> usize {
        self.covered
    }

    pub fn record(&mut self, tokens: usize, max_act: Vec<f32>) -> Result<()> {
        if max_act.len() != self.d_feat {
            return Err(CloomError::shape(
                "LatentHistory::record",
                format!("{} maxima for {} latents", max_act.len(), self.d_feat),
            ));
        }
        self.chunks.push_back((tokens, max_act));
        self.covered += tokens;
        while let Some((oldest, _)) = self.chunks.front() {
            if self.covered - oldest >= self.retain_tokens {
                self.covered -= oldest;
                self.chunks.pop_front();
            } else {
                break;
            }
        }
        Ok(())
    }
}

/// Fraction of latents whose maximum activation over the most recent
/// `window` tokens stays below `threshold`.
pub fn dead_latent_fraction(history: &LatentHistory, window: usize, threshold: f32) -> Result<f32> {
    if window == 0 || window > history.covered {
        return Err(CloomError::InvalidArgument(format!(
            "window of {window} tokens exceeds recorded history of {}",
            history.covered
        )));
    }
    let mut max = vec![f32::NEG_INFINITY; history.d_feat];
    let mut seen = 0;
    for (tokens, m) in history.chunks.iter().rev() {
        for (a, b) in max.iter_mut().zip(m) {
            *a = a.max(*b);
        }
        seen += tokens;
        if seen >= window {
            break;
        }
    }
    let dead = max.iter().filter(|&&v| v < threshold).count();
    Ok(dead as f32 / history.d_feat as f32)
}

fn heldout_fvu(tc: &Transcoder, pairs: &LayerPairs) -> Result<f32> {
    let pred = tc.reconstruct_batch(&pairs.inputs, pairs.n_rows());
    fvu(&pairs.outputs, &pred, pairs.d_model)
}

/// Held-out FVU of each layer of `bank`, restricted to image (`Some(true)`)
/// or text (`Some(false)`) rows when requested.
pub fn evaluate_bank(bank: &TranscoderBank, pairs: &[LayerPairs], image: Option<bool>) -> Result<Vec<f32>> {
    bank.transcoders
        .iter()
        .zip(pairs)
        .map(|(tc, p)| heldout_fvu(tc, &p.subset(image)))
        .collect()
}

struct Grads {
    w_enc: Tensor,
    b_enc: Tensor,
    w_dec: Tensor,
    b_dec: Tensor,
}

/// One minibatch: returns the MSE loss and fills `g` and `max_act`.
fn batch_grads(tc: &Transcoder, x: &[f32], y: &[f32], n: usize, g: &mut Grads, max_act: &mut [f32]) -> f32 {
    let (f, d) = (tc.d_feat(), tc.d_model());
    for t in [&mut g.w_enc, &mut g.b_enc, &mut g.w_dec, &mut g.b_dec] {
        t.data_mut().fill(0.0);
    }
    max_act.fill(0.0);
    let (codes, _) = tc.encode_batch(x, n);
    let scale = 2.0 / (n * d) as f32;
    let mut sse = 0.0f64;
    let w_dec = tc.w_dec.data();
    let mut dy = vec![0.0f32; d];
    for (r, code) in codes.iter().enumerate() {
        let yhat = tc.decode(code);
        let yr = &y[r * d..(r + 1) * d];
        let xr = &x[r * d..(r + 1) * d];
        for j in 0..d {
            let e = yhat[j] - yr[j];
            sse += (e as f64) * (e as f64);
            dy[j] = scale * e;
            g.b_dec.data_mut()[j] += dy[j];
        }
        for (&i, &z) in code.indices.iter().zip(&code.values) {
            max_act[i] = max_act[i].max(z);
            let mut dz = 0.0f32;
            let gw = g.w_dec.data_mut();
            for j in 0..d {
                gw[j * f + i] += z * dy[j];
                dz += w_dec[j * f + i] * dy[j];
            }
            let ge = &mut g.w_enc.data_mut()[i * d..(i + 1) * d];
            for (a, b) in ge.iter_mut().zip(xr) {
                *a += dz * b;
            }
            g.b_enc.data_mut()[i] += dz;
        }
    }
    (sse / (n * d) as f64) as f32
}

fn train_layer(
    layer: usize,
    train: &LayerPairs,
    heldout: &LayerPairs,
    cfg: &TcTrainConfig,
    lr: f32,
) -> Result<(Transcoder, LayerStats)> {
    let d = train.d_model;
    let f = cfg.expansion * d;
    let n = train.n_rows();
    if n == 0 {
        return Err(CloomError::InvalidArgument(format!("no training pairs for layer {layer}")));
    }
    let mut rng = SeededRng::stream(cfg.seed, 100 + layer as u64);
    let mut tc = Transcoder::init(layer, d, f, cfg.k, &mut rng);
    tc.validate()?;
    let mut mean = vec![0.0f64; d];
    for row in train.outputs.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v as f64 / n as f64;
        }
    }
    for (b, m) in tc.b_dec.data_mut().iter_mut().zip(&mean) {
        *b = *m as f32;
    }

    let opt = OptimizerConfig {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
        warmup_steps: cfg.warmup_steps,
    };
    let mut state = OptimizerState::new(opt, &[&tc.w_enc, &tc.b_enc, &tc.w_dec, &tc.b_dec]);
    let mut g = Grads {
        w_enc: Tensor::zeros(&[f, d]),
        b_enc: Tensor::zeros(&[f]),
        w_dec: Tensor::zeros(&[d, f]),
        b_dec: Tensor::zeros(&[d]),
    };
    let mut history = LatentHistory::new(f, cfg.dead_window);
    let mut stats = LayerStats {
        layer,
        steps: cfg.steps,
        curve: Vec::new(),
    };
    let eval = !heldout.is_image.is_empty() && heldout.n_rows() >= 2;
    if eval {
        stats.curve.push(StatPoint {
            step: 0,
            fvu: heldout_fvu(&tc, heldout)?,
            dead_pct: None,
        });
    }

    let b = cfg.batch_tokens.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0;
    let mut xb = vec![0.0f32; b * d];
    let mut yb = vec![0.0f32; b * d];
    let mut max_act = vec![0.0f32; f];
    for step in 1..=cfg.steps {
        for r in 0..b {
            if cursor == n {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let src = order[cursor];
            cursor += 1;
            xb[r * d..(r + 1) * d].copy_from_slice(&train.inputs[src * d..(src + 1) * d]);
            yb[r * d..(r + 1) * d].copy_from_slice(&train.outputs[src * d..(src + 1) * d]);
        }
        let loss = batch_grads(&tc, &xb, &yb, b, &mut g, &mut max_act);
        if !loss.is_finite() {
            return Err(CloomError::Diverged { step });
        }
        {
            let mut params = [&mut tc.w_enc, &mut tc.b_enc, &mut tc.w_dec, &mut tc.b_dec];
            adamw_step(&mut params, &[&g.w_enc, &g.b_enc, &g.w_dec, &g.b_dec], &mut state)?;
        }
        history.record(b, max_act.clone())?;
        if eval && (step % cfg.eval_every.max(1) == 0 || step == cfg.steps) {
            let window = cfg.dead_window.min(history.covered_tokens());
            let dead = dead_latent_fraction(&history, window, cfg.dead_threshold)?;
            let v = heldout_fvu(&tc, heldout)?;
            if !v.is_finite() {
                return Err(CloomError::Diverged { step });
            }
            info!(layer, step, fvu = v, dead_pct = 100.0 * dead, loss, "transcoder");
            stats.curve.push(StatPoint {
                step,
                fvu: v,
                dead_pct: Some(100.0 * dead),
            });
        }
    }
    Ok((tc, stats))
}

/// Trains one transcoder per decoder layer of `ck` on pairs harvested from
/// `train`; `heldout` drives the reported FVU curve.
pub fn train_bank(
    ck: &ModelCheckpoint,
    train: &[SyntheticSample],
    heldout: &[SyntheticSample],
    cfg: &TcTrainConfig,
) -> Result<TranscoderBank> {
    if cfg.k == 0 || cfg.expansion == 0 {
        return Err(CloomError::InvalidArgument("k and expansion must be positive".into()));
    }
    let d = ck.config().d_model;
    let lr = cfg
        .lr
        .unwrap_or_else(|| scaled_learning_rate(cfg.expansion, d) as f32);
    let used = &train[..train.len().min(cfg.max_samples)];
    let train_pairs = harvest_pairs(ck, used, cfg.text_only)?;
    let held_pairs = harvest_pairs(ck, heldout, false)?;
    let mut transcoders = Vec::new();
    let mut stats = Vec::new();
    for (l, (tp, hp)) in train_pairs.iter().zip(&held_pairs).enumerate() {
        let (tc, s) = train_layer(l, tp, hp, cfg, lr)?;
        transcoders.push(tc);
        stats.push(s);
    }
    Ok(TranscoderBank {
        meta: BankMeta {
            k: cfg.k,
            expansion: cfg.expansion,
            d_model: d,
            d_feat: cfg.expansion * d,
            model_hash: ck.hash()?,
            text_only: cfg.text_only,
            lr,
            batch_tokens: cfg.batch_tokens,
            seed: cfg.seed,
        },
        transcoders,
        stats,
    })
}
