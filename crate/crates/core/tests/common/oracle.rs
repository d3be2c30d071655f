// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference replacement model in `f64`, written from the architecture
//! description only: attention patterns and norm denominators come from the
//! trace, every MLP is replaced by its transcoder's active latents plus the
//! recorded error vector, and one source can be nudged along its write
//! direction. Finite differences of target pre-activations then give edge
//! weights without touching the library's linearization.

use cloom_core::attribution::GraphNode;
use cloom_core::attribution::NodeKind;
use cloom_core::transcoder::{ReplacementOutput, TranscoderBank};
use cloom_core::vlm::Model;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    Embedding(usize),
    Feature { layer: usize, pos: usize, feature: usize },
    Error { layer: usize, pos: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Feature { layer: usize, pos: usize, feature: usize },
    Logit(usize),
}

pub fn source_of(n: &GraphNode) -> Option<Source> {
    match n.kind {
        NodeKind::Embedding => Some(Source::Embedding(n.pos)),
        NodeKind::Feature => Some(Source::Feature {
            layer: n.layer?,
            pos: n.pos,
            feature: n.feature?,
        }),
        NodeKind::Error => Some(Source::Error { layer: n.layer?, pos: n.pos }),
        NodeKind::Logit => None,
    }
}

pub fn target_of(n: &GraphNode) -> Option<Target> {
    match n.kind {
        NodeKind::Feature => Some(Target::Feature {
            layer: n.layer?,
            pos: n.pos,
            feature: n.feature?,
        }),
        NodeKind::Logit => Some(Target::Logit(n.token?)),
        _ => None,
    }
}

fn f64s(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub struct Oracle<'a> {
    model: &'a Model,
    bank: &'a TranscoderBank,
    rep: &'a ReplacementOutput,
    t: usize,
    d: usize,
}

pub struct State {
    /// Normalized MLP input per layer, `[T][d]`.
    pub mlp_in: Vec<Vec<Vec<f64>>>,
    /// Final normed state at the last position.
    pub last: Vec<f64>,
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a Model, bank: &'a TranscoderBank, rep: &'a ReplacementOutput) -> Self {
        Self {
            model,
            bank,
            rep,
            t: rep.trace.seq_len,
            d: model.config.d_model,
        }
    }

    fn decoder_col(&self, layer: usize, feature: usize) -> Vec<f64> {
        let tc = &self.bank.transcoders[layer];
        let nf = tc.w_dec.shape()[1];
        (0..self.d).map(|j| tc.w_dec.data()[j * nf + feature] as f64).collect()
    }

    fn error_vec(&self, layer: usize, pos: usize) -> Vec<f64> {
        let rec = self
            .rep
            .errors
            .iter()
            .find(|e| e.layer == layer && e.position == pos)
            .expect("error record");
        f64s(&rec.e)
    }

    /// Activation and unit write direction of a source.
    pub fn source(&self, s: Source) -> (f64, Vec<f64>) {
        let unit = |v: Vec<f64>| {
            let n = norm(&v);
            (n, v.iter().map(|x| x / n).collect())
        };
        match s {
            Source::Embedding(p) => unit(f64s(self.rep.trace.embeddings.row(p))),
            Source::Error { layer, pos } => unit(self.error_vec(layer, pos)),
            Source::Feature { layer, pos, feature } => {
                let z = self.rep.codes[layer][pos].get(feature) as f64;
                (z, self.decoder_col(layer, feature))
            }
        }
    }

    /// Runs the frozen replacement model with `delta` added along the source's
    /// write direction.
    pub fn run(&self, nudge: Option<(Source, f64)>) -> State {
        let (t, d) = (self.t, self.d);
        let cfg = &self.model.config;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let w = &self.model.weights;
        let tr = &self.rep.trace;
        let extra = nudge.map(|(s, delta)| {
            let (_, dir) = self.source(s);
            (s, dir.iter().map(|v| v * delta).collect::<Vec<f64>>())
        });
        let mut x: Vec<Vec<f64>> = (0..t).map(|p| f64s(tr.embeddings.row(p))).collect();
        if let Some((Source::Embedding(p), v)) = &extra {
            for j in 0..d {
                x[*p][j] += v[j];
            }
        }
        let mut mlp_in = Vec::new();
        for (l, bw) in w.blocks.iter().enumerate() {
            let lt = &tr.layers[l];
            let g1 = f64s(bw.ln1.data());
            let g2 = f64s(bw.ln2.data());
            let wv = |i: usize, o: usize| bw.wv.data()[i * d + o] as f64;
            let wo = |i: usize, o: usize| bw.wo.data()[i * d + o] as f64;
            let vals: Vec<Vec<f64>> = (0..t)
                .map(|p| {
                    let den = lt.den_attn.data()[p] as f64;
                    let n1: Vec<f64> = (0..d).map(|i| g1[i] * x[p][i] / den).collect();
                    (0..d).map(|o| (0..d).map(|i| n1[i] * wv(i, o)).sum()).collect()
                })
                .collect();
            let mut mid = x.clone();
            for p in 0..t {
                let mut ctx = vec![0.0f64; d];
                for h in 0..heads {
                    for j in 0..t {
                        let a = lt.attn.data()[h * t * t + p * t + j] as f64;
                        for c in h * dh..(h + 1) * dh {
                            ctx[c] += a * vals[j][c];
                        }
                    }
                }
                for o in 0..d {
                    mid[p][o] += (0..d).map(|i| ctx[i] * wo(i, o)).sum::<f64>();
                }
            }
            let n2: Vec<Vec<f64>> = (0..t)
                .map(|p| {
                    let den = lt.den_mlp.data()[p] as f64;
                    (0..d).map(|i| g2[i] * mid[p][i] / den).collect()
                })
                .collect();
            mlp_in.push(n2);
            let b_dec = f64s(self.bank.transcoders[l].b_dec.data());
            for p in 0..t {
                let mut out = b_dec.clone();
                let code = &self.rep.codes[l][p];
                for (&f, &z) in code.indices.iter().zip(&code.values) {
                    let col = self.decoder_col(l, f);
                    for j in 0..d {
                        out[j] += z as f64 * col[j];
                    }
                }
                let e = self.error_vec(l, p);
                for j in 0..d {
                    out[j] += e[j];
                }
                if let Some((s, v)) = &extra {
                    let hit = match *s {
                        Source::Feature { layer, pos, .. } | Source::Error { layer, pos } => layer == l && pos == p,
                        Source::Embedding(_) => false,
                    };
                    if hit {
                        for j in 0..d {
                            out[j] += v[j];
                        }
                    }
                }
                for j in 0..d {
                    mid[p][j] += out[j];
                }
            }
            x = mid;
        }
        let lnf = f64s(w.ln_f.data());
        let den = tr.den_final as f64;
        let last = (0..d).map(|j| lnf[j] * x[t - 1][j] / den).collect();
        State { mlp_in, last }
    }

    /// Feature pre-activation, or the logit minus the mean logit.
    pub fn read(&self, st: &State, target: Target) -> f64 {
        match target {
            Target::Feature { layer, pos, feature } => {
                let tc = &self.bank.transcoders[layer];
                let row = tc.encoder_row(feature);
                tc.b_enc.data()[feature] as f64 + row.iter().zip(&st.mlp_in[layer][pos]).map(|(a, b)| *a as f64 * b).sum::<f64>()
            }
            Target::Logit(tok) => {
                let u = &self.model.weights.unembed;
                let v = u.shape()[1];
                let logits: Vec<f64> = (0..v)
                    .map(|k| (0..self.d).map(|j| st.last[j] * u.data()[j * v + k] as f64).sum())
                    .collect();
                logits[tok] - logits.iter().sum::<f64>() / v as f64
            }
        }
    }

    /// `∂target/∂a_s` by a central difference with step `eps`.
    pub fn derivative(&self, s: Source, target: Target, eps: f64) -> f64 {
        let up = self.read(&self.run(Some((s, eps))), target);
        let down = self.read(&self.run(Some((s, -eps))), target);
        (up - down) / (2.0 * eps)
    }

    /// `a_s · ∂target/∂a_s`.
    pub fn edge(&self, s: Source, target: Target, eps: f64) -> f64 {
        self.source(s).0 * self.derivative(s, target, eps)
    }
}
