// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{SparseCode, TranscoderBank};
use crate::error::{CloomError, Result};
use crate::vlm::{ActivationTrace, ImageGrid, MlpHook, Model};

/// `e = MLP(x) − TC(x)` at one `(layer, position)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub layer: usize,
    pub position: usize,
    pub e: Vec<f32>,
    /// `MLP(x)` and `TC(x)` of the original pass. The replacement pass writes
    /// `MLP(x) + (TC(x') − TC(x))`, equal to `TC(x') + e` but bitwise equal to
    /// the original output when `x' = x`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mlp_out: Vec<f32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recon: Vec<f32>,
}

impl ErrorRecord {
    /// MLP output of the replacement pass given the live reconstruction.
    pub fn output(&self, live_recon: &[f32]) -> Vec<f32> {
        if self.mlp_out.len() == live_recon.len() && self.recon.len() == live_recon.len() {
            self.mlp_out
                .iter()
                .zip(&self.recon)
                .zip(live_recon)
                .map(|((m, r), y)| m + (y - r))
                .collect()
        } else {
            live_recon.iter().zip(&self.e).map(|(y, e)| y + e).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementOutput {
    pub logits: Vec<f32>,
    /// Trace of the replacement forward pass.
    pub trace: ActivationTrace,
    /// Error vectors computed against the original forward pass, layer-major.
    pub errors: Vec<ErrorRecord>,
    /// `codes[layer][position]`: active latents seen by the replacement pass.
    pub codes: Vec<Vec<SparseCode>>,
    pub with_error_nodes: bool,
}

impl ReplacementOutput {
    pub fn error(&self, layer: usize, position: usize) -> Option<&ErrorRecord> {
        let t = self.trace.seq_len;
        self.errors.get(layer * t + position).filter(|r| r.layer == layer && r.position == position)
    }
}

/// Residual write `(value − z)·d` for one latent at one site, computed from the
/// live activation during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LatentEdit {
    pub layer: usize,
    pub pos: usize,
    pub feature: usize,
    pub value: f32,
}

struct ReplaceHook<'a> {
    bank: &'a TranscoderBank,
    d: usize,
    errors: Option<&'a [ErrorRecord]>,
    edits: &'a [LatentEdit],
    t: usize,
    codes: Vec<Vec<SparseCode>>,
    /// `(z, Δz)` per edit, in edit order.
    applied: Vec<(f32, f32)>,
}

impl MlpHook for ReplaceHook<'_> {
    fn after_mlp(&mut self, layer: usize, mlp_in: &[f32], mlp_out: &mut [f32]) -> Result<()> {
        let tc = self.bank.layer(layer)?;
        let d = self.d;
        let mut codes = Vec::with_capacity(self.t);
        for p in 0..self.t {
            let code = tc.encode(&mlp_in[p * d..(p + 1) * d])?;
            let mut y = tc.decode(&code);
            if let Some(errs) = self.errors {
                y = errs[layer * self.t + p].output(&y);
            }
            mlp_out[p * d..(p + 1) * d].copy_from_slice(&y);
            codes.push(code);
        }
        for (i, ed) in self.edits.iter().enumerate() {
            if ed.layer != layer {
                continue;
            }
            let z = codes[ed.pos].get(ed.feature);
            let dz = ed.value - z;
            self.applied[i] = (z, dz);
            if dz != 0.0 {
                let row = &mut mlp_out[ed.pos * d..(ed.pos + 1) * d];
                for (j, r) in row.iter_mut().enumerate() {
                    *r += dz * tc.w_dec.data()[j * tc.d_feat() + ed.feature];
                }
            }
        }
        self.codes.push(codes);
        Ok(())
    }
}

pub(crate) struct HookedRun {
    pub logits: Vec<f32>,
    pub trace: ActivationTrace,
    pub codes: Vec<Vec<SparseCode>>,
    pub applied: Vec<(f32, f32)>,
}

/// Replacement pass with fixed error vectors and live latent edits.
pub(crate) fn run_replacement(
    model: &Model,
    bank: &TranscoderBank,
    image: &ImageGrid,
    prompt: &[usize],
    errors: Option<&[ErrorRecord]>,
    edits: &[LatentEdit],
) -> Result<HookedRun> {
    let mut hook = ReplaceHook {
        bank,
        d: model.config.d_model,
        errors,
        edits,
        t: model.config.n_image_tokens + prompt.len(),
        codes: Vec::new(),
        applied: vec![(0.0, 0.0); edits.len()],
    };
    let (logits, trace) = model.forward_hooked(image, prompt, &mut hook)?;
    Ok(HookedRun {
        logits,
        trace,
        codes: hook.codes,
        applied: hook.applied,
    })
}

/// Runs the model with every MLP replaced by its transcoder. With error nodes
/// the error vectors of the original pass are added back so the residual
/// stream matches the original model.
pub fn replacement_forward(
    model: &Model,
    bank: &TranscoderBank,
    image: &ImageGrid,
    prompt: &[usize],
    with_error_nodes: bool,
) -> Result<ReplacementOutput> {
    bank.check_matches(model)?;
    let (_, original) = model.forward(image, prompt, true)?;
    let original = original.ok_or_else(|| CloomError::IncompleteTrace("original pass produced no trace".into()))?;
    let t = original.seq_len;
    let mut errors = Vec::with_capacity(bank.n_layers() * t);
    for (l, lt) in original.layers.iter().enumerate() {
        let tc = bank.layer(l)?;
        for p in 0..t {
            let recon = tc.decode(&tc.encode(lt.mlp_in.row(p))?);
            let mlp_out = lt.mlp_out.row(p).to_vec();
            let e = mlp_out.iter().zip(&recon).map(|(m, r)| m - r).collect();
            errors.push(ErrorRecord {
                layer: l,
                position: p,
                e,
                mlp_out,
                recon,
            });
        }
    }
    let run = run_replacement(model, bank, image, prompt, with_error_nodes.then_some(errors.as_slice()), &[])?;
    Ok(ReplacementOutput {
        logits: run.logits,
        trace: run.trace,
        errors,
        codes: run.codes,
        with_error_nodes,
    })
}

/// [`run_replacement`] replayed over `base` with its attention patterns and
/// norm denominators held fixed. Returns the hooked run with the MLP inputs
/// of each layer in place of a fresh trace.
pub(crate) fn run_replacement_frozen(
    model: &Model,
    bank: &TranscoderBank,
    base: &ActivationTrace,
    errors: &[ErrorRecord],
    edits: &[LatentEdit],
) -> Result<(Vec<f32>, Vec<Vec<f32>>, Vec<Vec<SparseCode>>, Vec<(f32, f32)>)> {
    let mut hook = ReplaceHook {
        bank,
        d: model.config.d_model,
        errors: Some(errors),
        edits,
        t: base.seq_len,
        codes: Vec::new(),
        applied: vec![(0.0, 0.0); edits.len()],
    };
    let (logits, mlp_in) = model.replay_frozen_hooked(base, Some(&mut hook))?;
    Ok((logits, mlp_in, hook.codes, hook.applied))
}
