// SPDX-License-Identifier: MIT OR Apache-2.0

//! The locally linear model around one trace.
//!
//! Attention patterns and norm denominators are constants taken from the
//! trace, and the MLP path is cut: whatever an MLP writes is carried by
//! feature and error nodes instead. Under those rules the map from a residual
//! write to every later MLP input (and to the final normed state) is linear,
//! and it is evaluated here in `f64`.

use crate::error::{CloomError, Result};
use crate::transcoder::TranscoderBank;
use crate::vlm::{ActivationTrace, Model};

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

struct FrozenLayer {
    g1: Vec<f64>,
    den1: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    att: Vec<f64>,
    g2: Vec<f64>,
    den2: Vec<f64>,
}

/// A residual-stream write: `vector` added at `position` on the residual
/// boundary `boundary` (0 is the decoder input, `l + 1` follows layer `l`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub boundary: usize,
    pub position: usize,
}

/// Deltas induced by one injection.
#[derive(Debug, Clone, PartialEq)]
pub struct JvpDeltas {
    pub boundary: usize,
    /// `mlp_in[l]` is `[T, d]` for every layer `l`; rows are zero where the
    /// injection cannot reach, and whole layers are zero for `l < boundary`.
    pub mlp_in: Vec<Vec<f64>>,
    /// Which positions are reachable at each layer's MLP input.
    pub support: Vec<Vec<bool>>,
    /// Delta of the final normed state at the last position.
    pub final_normed: Vec<f64>,
}

impl JvpDeltas {
    pub fn mlp_in_row(&self, layer: usize, pos: usize, d: usize) -> &[f64] {
        &self.mlp_in[layer][pos * d..(pos + 1) * d]
    }
}

/// Node address used for virtual weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Embedding { pos: usize },
    Feature { layer: usize, pos: usize, feature: usize },
    Error { layer: usize, pos: usize },
    Logit { token: usize },
}

pub struct Linearization<'a> {
    trace: &'a ActivationTrace,
    bank: &'a TranscoderBank,
    d: usize,
    t: usize,
    heads: usize,
    layers: Vec<FrozenLayer>,
    ln_f: Vec<f64>,
    den_f: f64,
    /// `[d, V]` unembedding with the mean over the vocabulary removed from
    /// every row.
    centered_unembed: Vec<f64>,
    vocab: usize,
    /// Error vectors by `layer * T + position`, when available.
    errors: Option<Vec<Vec<f64>>>,
}

impl<'a> Linearization<'a> {
    pub fn new(model: &Model, bank: &'a TranscoderBank, trace: &'a ActivationTrace) -> Result<Self> {
        let cfg = &model.config;
        trace.check_complete(cfg.d_model)?;
        bank.check_matches(model)?;
        if trace.n_layers() != cfg.n_decoder_layers {
            return Err(CloomError::IncompleteTrace(format!(
                "trace has {} layers, model {}",
                trace.n_layers(),
                cfg.n_decoder_layers
            )));
        }
        let layers = model
            .weights
            .blocks
            .iter()
            .zip(&trace.layers)
            .map(|(bw, lt)| FrozenLayer {
                g1: to_f64(bw.ln1.data()),
                den1: to_f64(lt.den_attn.data()),
                wv: to_f64(bw.wv.data()),
                wo: to_f64(bw.wo.data()),
                att: to_f64(lt.attn.data()),
                g2: to_f64(bw.ln2.data()),
                den2: to_f64(lt.den_mlp.data()),
            })
            .collect();
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let u = model.weights.unembed.data();
        let mut centered_unembed = vec![0.0f64; d * v];
        for j in 0..d {
            let row = &u[j * v..(j + 1) * v];
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / v as f64;
            for (c, &x) in centered_unembed[j * v..(j + 1) * v].iter_mut().zip(row) {
                *c = x as f64 - mean;
            }
        }
        Ok(Self {
            trace,
            bank,
            d,
            t: trace.seq_len,
            heads: cfg.n_heads,
            layers,
            ln_f: to_f64(model.weights.ln_f.data()),
            den_f: trace.den_final as f64,
            centered_unembed,
            vocab: v,
            errors: None,
        })
    }

    /// Attaches the error vectors of a replacement pass, `layer * T + position`.
    pub fn with_errors(mut self, errors: &[crate::transcoder::ErrorRecord]) -> Result<Self> {
        let n = self.layers.len() * self.t;
        if errors.len() != n {
            return Err(CloomError::IncompleteTrace(format!(
                "{} error records for {} layer positions",
                errors.len(),
                n
            )));
        }
        self.errors = Some(errors.iter().map(|e| to_f64(&e.e)).collect());
        Ok(self)
    }

    pub fn trace(&self) -> &ActivationTrace {
        self.trace
    }

    pub fn d_model(&self) -> usize {
        self.d
    }

    pub fn seq_len(&self) -> usize {
        self.t
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Propagates residual writes made on `boundary` through the frozen model.
    pub fn frozen_jvp(&self, boundary: usize, writes: &[(usize, Vec<f64>)]) -> Result<JvpDeltas> {
        let (d, t, nl) = (self.d, self.t, self.layers.len());
        if boundary > nl {
            return Err(CloomError::InvalidArgument(format!(
                "boundary {boundary} beyond {nl} layers"
            )));
        }
        let mut x = vec![0.0f64; t * d];
        let mut support = vec![false; t];
        for (pos, v) in writes {
            if *pos >= t || v.len() != d {
                return Err(CloomError::shape(
                    "frozen_jvp",
                    format!("write at position {pos} of length {} (T = {t}, d = {d})", v.len()),
                ));
            }
            for (a, b) in x[pos * d..(pos + 1) * d].iter_mut().zip(v) {
                *a += b;
            }
            support[*pos] = true;
        }
        let mut mlp_in = vec![Vec::new(); nl];
        let mut supports = vec![vec![false; t]; nl];
        for l in boundary..nl {
            let fl = &self.layers[l];
            self.attention_delta(fl, &mut x, &mut support);
            let mut n2 = vec![0.0f64; t * d];
            for p in (0..t).filter(|&p| support[p]) {
                let inv = 1.0 / fl.den2[p];
                for j in 0..d {
                    n2[p * d + j] = fl.g2[j] * x[p * d + j] * inv;
                }
            }
            mlp_in[l] = n2;
            supports[l] = support.clone();
        }
        for m in mlp_in.iter_mut().take(boundary) {
            *m = vec![0.0; t * d];
        }
        let last = t - 1;
        let final_normed = (0..d)
            .map(|j| self.ln_f[j] * x[last * d + j] / self.den_f)
            .collect();
        Ok(JvpDeltas {
            boundary,
            mlp_in,
            support: supports,
            final_normed,
        })
    }

    /// `x += Attn(x)` under frozen patterns and denominators.
    fn attention_delta(&self, fl: &FrozenLayer, x: &mut [f64], support: &mut [bool]) {
        let (d, t, h) = (self.d, self.t, self.heads);
        let dh = d / h;
        let src: Vec<usize> = (0..t).filter(|&p| support[p]).collect();
        if src.is_empty() {
            return;
        }
        // v_j = (g1 ⊙ x_j / den1_j) W_v for every source row.
        let mut v = vec![0.0f64; src.len() * d];
        for (r, &j) in src.iter().enumerate() {
            let inv = 1.0 / fl.den1[j];
            let vr = &mut v[r * d..(r + 1) * d];
            for i in 0..d {
                let n = fl.g1[i] * x[j * d + i] * inv;
                if n == 0.0 {
                    continue;
                }
                let w = &fl.wv[i * d..(i + 1) * d];
                for (o, wv) in vr.iter_mut().zip(w) {
                    *o += n * wv;
                }
            }
        }
        let mut ctx = vec![0.0f64; d];
        for p in 0..t {
            ctx.fill(0.0);
            let mut reached = false;
            for hh in 0..h {
                let row = &fl.att[hh * t * t + p * t..hh * t * t + (p + 1) * t];
                for (r, &j) in src.iter().enumerate() {
                    let a = row[j];
                    if a == 0.0 {
                        continue;
                    }
                    reached = true;
                    for c in hh * dh..(hh + 1) * dh {
                        ctx[c] += a * v[r * d + c];
                    }
                }
            }
            if !reached {
                continue;
            }
            support[p] = true;
            let xp = &mut x[p * d..(p + 1) * d];
            for i in 0..d {
                let c = ctx[i];
                if c == 0.0 {
                    continue;
                }
                let w = &fl.wo[i * d..(i + 1) * d];
                for (o, wo) in xp.iter_mut().zip(w) {
                    *o += c * wo;
                }
            }
        }
    }

    /// Encoder row of feature `feature` at `layer`, in `f64`.
    pub fn encoder(&self, layer: usize, feature: usize) -> Result<Vec<f64>> {
        let tc = self.bank.layer(layer)?;
        if feature >= tc.d_feat() {
            return Err(CloomError::NotFound(format!("feature {feature} at layer {layer}")));
        }
        Ok(to_f64(tc.encoder_row(feature)))
    }

    /// Mean-centered unembedding column of `token`.
    pub fn logit_direction(&self, token: usize) -> Result<Vec<f64>> {
        if token >= self.vocab {
            return Err(CloomError::TokenOutOfRange {
                id: token,
                vocab: self.vocab,
            });
        }
        Ok((0..self.d).map(|j| self.centered_unembed[j * self.vocab + token]).collect())
    }

    /// Pre-activation of a target node from the trace: `W_enc x + b_enc` for
    /// features, the centered logit for logits.
    pub fn target_preactivation(&self, node: NodeRef) -> Result<f64> {
        match node {
            NodeRef::Feature { layer, pos, feature } => {
                let enc = self.encoder(layer, feature)?;
                let x = self.trace.layers[layer].mlp_in.row(pos);
                let b = self.bank.layer(layer)?.b_enc.data()[feature] as f64;
                Ok(b + enc.iter().zip(x).map(|(e, &v)| e * v as f64).sum::<f64>())
            }
            NodeRef::Logit { token } => {
                let dir = self.logit_direction(token)?;
                let last = self.trace.resid_final.row(self.t - 1);
                let den = self.den_f;
                Ok((0..self.d)
                    .map(|j| dir[j] * self.ln_f[j] * last[j] as f64 / den)
                    .sum())
            }
            _ => Err(CloomError::InvalidArgument("embeddings and error nodes have no pre-activation".into())),
        }
    }

    /// Residual write `(site, direction, activation)` of a source node; the
    /// written vector is `activation × direction`.
    pub fn source_write(&self, node: NodeRef) -> Result<(Site, Vec<f64>, f64)> {
        let d = self.d;
        match node {
            NodeRef::Embedding { pos } => {
                self.check_pos(pos)?;
                let v = to_f64(self.trace.embeddings.row(pos));
                let (dir, a) = normalize(v);
                Ok((Site { boundary: 0, position: pos }, dir, a))
            }
            NodeRef::Feature { layer, pos, feature } => {
                self.check_pos(pos)?;
                let tc = self.bank.layer(layer)?;
                if feature >= tc.d_feat() {
                    return Err(CloomError::NotFound(format!("feature {feature} at layer {layer}")));
                }
                let dir = to_f64(&tc.decoder_vector(feature));
                let code = crate::transcoder::topk_relu(
                    &tc.preactivations(self.trace.layers[layer].mlp_in.row(pos)),
                    tc.k,
                );
                let a = code.get(feature) as f64;
                Ok((
                    Site {
                        boundary: layer + 1,
                        position: pos,
                    },
                    dir,
                    a,
                ))
            }
            NodeRef::Error { layer, pos } => {
                self.check_pos(pos)?;
                let errs = self
                    .errors
                    .as_ref()
                    .ok_or_else(|| CloomError::IncompleteTrace("no error records attached".into()))?;
                let v = errs
                    .get(layer * self.t + pos)
                    .cloned()
                    .ok_or_else(|| CloomError::NotFound(format!("error node at layer {layer}, position {pos}")))?;
                debug_assert_eq!(v.len(), d);
                let (dir, a) = normalize(v);
                Ok((
                    Site {
                        boundary: layer + 1,
                        position: pos,
                    },
                    dir,
                    a,
                ))
            }
            NodeRef::Logit { .. } => Err(CloomError::NonCausal("logit nodes are sinks".into())),
        }
    }

    fn check_pos(&self, pos: usize) -> Result<()> {
        if pos >= self.t {
            return Err(CloomError::InvalidArgument(format!(
                "position {pos} outside sequence of {}",
                self.t
            )));
        }
        Ok(())
    }

    /// Reads a target out of an injection's deltas.
    pub fn read_target(&self, deltas: &JvpDeltas, target: NodeRef) -> Result<f64> {
        match target {
            NodeRef::Feature { layer, pos, feature } => {
                if layer < deltas.boundary {
                    return Ok(0.0);
                }
                let enc = self.encoder(layer, feature)?;
                let row = deltas.mlp_in_row(layer, pos, self.d);
                Ok(enc.iter().zip(row).map(|(a, b)| a * b).sum())
            }
            NodeRef::Logit { token } => {
                let dir = self.logit_direction(token)?;
                Ok(dir.iter().zip(&deltas.final_normed).map(|(a, b)| a * b).sum())
            }
            _ => Err(CloomError::InvalidArgument(
                "targets must be feature or logit nodes".into(),
            )),
        }
    }

    /// `w = f_decᵀ J f_enc`: the effect of a unit activation of `s` on the
    /// pre-activation of `t` in the frozen model.
    pub fn virtual_weight(&self, s: NodeRef, t: NodeRef) -> Result<f64> {
        let s_stage = match s {
            NodeRef::Embedding { .. } => 0,
            NodeRef::Feature { layer, .. } | NodeRef::Error { layer, .. } => layer + 1,
            NodeRef::Logit { .. } => return Err(CloomError::NonCausal("logit nodes are sinks".into())),
        };
        let t_stage = match t {
            NodeRef::Feature { layer, .. } => layer,
            NodeRef::Logit { .. } => self.layers.len(),
            NodeRef::Embedding { .. } => {
                return Err(CloomError::NonCausal("embedding nodes have no inputs".into()))
            }
            NodeRef::Error { .. } => {
                return Err(CloomError::NonCausal("error nodes have no inputs".into()))
            }
        };
        if s_stage > t_stage {
            return Err(CloomError::NonCausal(format!("{s:?} does not precede {t:?}")));
        }
        let (site, dir, _) = self.source_write(s)?;
        let deltas = self.frozen_jvp(site.boundary, &[(site.position, dir)])?;
        self.read_target(&deltas, t)
    }
}

fn normalize(v: Vec<f64>) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return (v, 0.0);
    }
    (v.into_iter().map(|x| x / n).collect(), n)
}
