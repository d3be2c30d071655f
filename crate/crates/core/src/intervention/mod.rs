// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature clamps, ablations, steering and cross-prompt patching on the
//! replacement model.
//!
//! A clamp of latent `i` at `(layer, pos)` to value `v` adds `(v − z)·d_i` to
//! the residual stream right after that layer's MLP, with `z` read from the
//! live forward pass. Attention and norms stay live downstream. Error vectors
//! are those of the unmodified input.

mod concept;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attribution::trace_id;
use crate::error::{CloomError, Result};
use crate::transcoder::{replacement_forward, run_replacement, run_replacement_frozen, LatentEdit, SparseCode, TranscoderBank};
use crate::vlm::model::{argmax, softmax};
use crate::vlm::{vocab, ActivationTrace, ImageGrid, Model};

pub use concept::{concept_features, concept_swap, swap_plan, ConceptScore, SwapTrial};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Positions {
    One(usize),
    Many(Vec<usize>),
}

impl Positions {
    pub fn to_vec(&self) -> Vec<usize> {
        match self {
            Positions::One(p) => vec![*p],
            Positions::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clamp {
    pub layer: usize,
    pub pos: Positions,
    pub feature: usize,
    pub value: f32,
}

fn one() -> f32 {
    1.0
}

fn is_one(v: &f32) -> bool {
    *v == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DonorSpec {
    /// Trace id of the donor input.
    pub trace: String,
    #[serde(default)]
    pub copy: Vec<[usize; 3]>,
    #[serde(default)]
    pub suppress: Vec<[usize; 3]>,
    /// Multiplier on copied donor activations.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub scale: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionPlan {
    #[serde(default)]
    pub clamps: Vec<Clamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor: Option<DonorSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Clamp,
    Suppress,
    Copy,
}

/// Latent activations of a donor input under the replacement model.
#[derive(Debug, Clone, PartialEq)]
pub struct DonorRun {
    pub trace_id: String,
    pub codes: Vec<Vec<SparseCode>>,
}

impl DonorRun {
    pub fn capture(model: &Model, bank: &TranscoderBank, image: &ImageGrid, prompt: &[usize]) -> Result<Self> {
        let rep = replacement_forward(model, bank, image, prompt, true)?;
        Ok(Self {
            trace_id: trace_id(image, prompt),
            codes: rep.codes,
        })
    }

    fn value(&self, l: usize, p: usize, f: usize) -> Result<f32> {
        self.codes
            .get(l)
            .and_then(|row| row.get(p))
            .map(|c| c.get(f))
            .ok_or_else(|| CloomError::Reference(format!("donor has no activation at layer {l} position {p}")))
    }
}

impl InterventionPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        Ok(plan)
    }

    pub fn is_empty(&self) -> bool {
        self.clamps.is_empty() && self.donor.as_ref().is_none_or(|d| d.copy.is_empty() && d.suppress.is_empty())
    }

    /// Checks keys against the model and bank for a sequence of `seq_len`.
    pub fn validate(&self, bank: &TranscoderBank, seq_len: usize) -> Result<()> {
        let nl = bank.n_layers();
        let nf = bank.meta.d_feat;
        let mut seen = BTreeSet::new();
        let mut check = |l: usize, p: usize, f: usize, what: &str| -> Result<()> {
            if l >= nl {
                return Err(CloomError::InvalidArgument(format!("{what}: layer {l} out of range (0..{nl})")));
            }
            if f >= nf {
                return Err(CloomError::InvalidArgument(format!("{what}: feature {f} out of range (0..{nf})")));
            }
            if p >= seq_len {
                return Err(CloomError::InvalidArgument(format!(
                    "{what}: position {p} out of range (0..{seq_len})"
                )));
            }
            if !seen.insert((l, p, f)) {
                return Err(CloomError::InvalidArgument(format!("{what}: duplicate key ({l}, {p}, {f})")));
            }
            Ok(())
        };
        for (i, c) in self.clamps.iter().enumerate() {
            if !c.value.is_finite() {
                return Err(CloomError::InvalidArgument(format!("clamps[{i}]: value is not finite")));
            }
            let ps = c.pos.to_vec();
            if ps.is_empty() {
                return Err(CloomError::InvalidArgument(format!("clamps[{i}]: empty position set")));
            }
            for p in ps {
                check(c.layer, p, c.feature, &format!("clamps[{i}]"))?;
            }
        }
        if let Some(d) = &self.donor {
            if !d.scale.is_finite() {
                return Err(CloomError::InvalidArgument("donor.scale is not finite".into()));
            }
            for (i, &[l, p, f]) in d.suppress.iter().enumerate() {
                check(l, p, f, &format!("donor.suppress[{i}]"))?;
            }
            for (i, &[l, p, f]) in d.copy.iter().enumerate() {
                check(l, p, f, &format!("donor.copy[{i}]"))?;
            }
        }
        Ok(())
    }

    fn resolve(&self, donor: Option<&DonorRun>) -> Result<Vec<(LatentEdit, EditKind)>> {
        let mut out = Vec::new();
        for c in &self.clamps {
            for p in c.pos.to_vec() {
                out.push((edit(c.layer, p, c.feature, c.value), EditKind::Clamp));
            }
        }
        if let Some(d) = &self.donor {
            for &[l, p, f] in &d.suppress {
                out.push((edit(l, p, f, 0.0), EditKind::Suppress));
            }
            if !d.copy.is_empty() {
                let run = donor.ok_or_else(|| CloomError::Reference(format!("donor trace {} not supplied", d.trace)))?;
                if run.trace_id != d.trace {
                    return Err(CloomError::Reference(format!(
                        "plan names donor {} but {} was supplied",
                        d.trace, run.trace_id
                    )));
                }
                for &[l, p, f] in &d.copy {
                    out.push((edit(l, p, f, d.scale * run.value(l, p, f)?), EditKind::Copy));
                }
            }
        }
        Ok(out)
    }
}

fn edit(layer: usize, pos: usize, feature: usize, value: f32) -> LatentEdit {
    LatentEdit {
        layer,
        pos,
        feature,
        value,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WatchedFeature {
    pub layer: usize,
    pub feature: usize,
    /// `None` watches the maximum over positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: usize,
    pub word: String,
    pub prob: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSummary {
    pub logits: Vec<f32>,
    pub argmax: usize,
    pub top: Vec<TokenProb>,
}

impl OutputSummary {
    pub fn new(logits: &[f32], k: usize) -> Self {
        Self {
            logits: logits.to_vec(),
            argmax: argmax(logits),
            top: top_tokens(logits, k),
        }
    }
}

pub fn top_tokens(logits: &[f32], k: usize) -> Vec<TokenProb> {
    let probs = softmax(logits);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|t| TokenProb {
            token: t,
            word: vocab::word(t).to_string(),
            prob: probs[t],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedEdit {
    pub layer: usize,
    pub pos: usize,
    pub feature: usize,
    pub kind: EditKind,
    pub value: f32,
    /// Live activation before the edit.
    pub z: f32,
    pub delta: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatchedShift {
    pub layer: usize,
    pub feature: usize,
    pub pos: Option<usize>,
    pub baseline: f32,
    pub intervened: f32,
    pub delta: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub trace_id: String,
    pub prompt: String,
    pub baseline: OutputSummary,
    pub intervened: OutputSummary,
    pub applied: Vec<AppliedEdit>,
    pub watched: Vec<WatchedShift>,
    pub argmax_changed: bool,
}

/// Both forward passes of one intervention.
#[derive(Debug, Clone)]
pub struct InterventionRun {
    pub baseline_logits: Vec<f32>,
    pub baseline_trace: ActivationTrace,
    pub baseline_codes: Vec<Vec<SparseCode>>,
    pub logits: Vec<f32>,
    pub trace: ActivationTrace,
    pub codes: Vec<Vec<SparseCode>>,
    pub applied: Vec<AppliedEdit>,
}

/// Runs the baseline replacement pass and the intervened pass.
pub fn run_plan(
    model: &Model,
    bank: &TranscoderBank,
    image: &ImageGrid,
    prompt: &[usize],
    plan: &InterventionPlan,
    donor: Option<&DonorRun>,
) -> Result<InterventionRun> {
    model.validate_input(image, prompt)?;
    plan.validate(bank, model.config.n_image_tokens + prompt.len())?;
    let resolved = plan.resolve(donor)?;
    let base = replacement_forward(model, bank, image, prompt, true)?;
    let edits: Vec<LatentEdit> = resolved.iter().map(|(e, _)| *e).collect();
    let run = run_replacement(model, bank, image, prompt, Some(&base.errors), &edits)?;
    let applied = resolved
        .iter()
        .zip(&run.applied)
        .map(|((e, kind), &(z, delta))| AppliedEdit {
            layer: e.layer,
            pos: e.pos,
            feature: e.feature,
            kind: *kind,
            value: e.value,
            z,
            delta,
        })
        .collect();
    Ok(InterventionRun {
        baseline_logits: base.logits,
        baseline_trace: base.trace,
        baseline_codes: base.codes,
        logits: run.logits,
        trace: run.trace,
        codes: run.codes,
        applied,
    })
}

/// Outputs of a plan replayed with the baseline's attention patterns and norm
/// denominators held fixed; isolates the linear part of an intervention.
#[derive(Debug, Clone)]
pub struct FrozenRun {
    pub baseline_logits: Vec<f32>,
    pub logits: Vec<f32>,
    /// Per layer, `[T, d]` MLP inputs of the baseline and intervened replays.
    pub baseline_mlp_in: Vec<Vec<f32>>,
    pub mlp_in: Vec<Vec<f32>>,
}

pub fn run_plan_frozen(
    model: &Model,
    bank: &TranscoderBank,
    image: &ImageGrid,
    prompt: &[usize],
    plan: &InterventionPlan,
    donor: Option<&DonorRun>,
) -> Result<FrozenRun> {
    model.validate_input(image, prompt)?;
    plan.validate(bank, model.config.n_image_tokens + prompt.len())?;
    let edits: Vec<LatentEdit> = plan.resolve(donor)?.into_iter().map(|(e, _)| e).collect();
    let base = replacement_forward(model, bank, image, prompt, true)?;
    let (baseline_logits, baseline_mlp_in, _, _) = run_replacement_frozen(model, bank, &base.trace, &base.errors, &[])?;
    let (logits, mlp_in, _, _) = run_replacement_frozen(model, bank, &base.trace, &base.errors, &edits)?;
    Ok(FrozenRun {
        baseline_logits,
        logits,
        baseline_mlp_in,
        mlp_in,
    })
}

fn watched_value(codes: &[Vec<SparseCode>], w: &WatchedFeature) -> Result<f32> {
    let row = codes
        .get(w.layer)
        .ok_or_else(|| CloomError::InvalidArgument(format!("watched layer {} out of range", w.layer)))?;
    match w.pos {
        Some(p) => row
            .get(p)
            .map(|c| c.get(w.feature))
            .ok_or_else(|| CloomError::InvalidArgument(format!("watched position {p} out of range"))),
        None => Ok(row.iter().map(|c| c.get(w.feature)).fold(0.0, f32::max)),
    }
}

impl InterventionRun {
    pub fn report(&self, image: &ImageGrid, prompt: &[usize], watch: &[WatchedFeature]) -> Result<InterventionReport> {
        let watched = watch
            .iter()
            .map(|w| {
                let b = watched_value(&self.baseline_codes, w)?;
                let i = watched_value(&self.codes, w)?;
                Ok(WatchedShift {
                    layer: w.layer,
                    feature: w.feature,
                    pos: w.pos,
                    baseline: b,
                    intervened: i,
                    delta: i - b,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let baseline = OutputSummary::new(&self.baseline_logits, 5);
        let intervened = OutputSummary::new(&self.logits, 5);
        Ok(InterventionReport {
            trace_id: trace_id(image, prompt),
            prompt: vocab::decode(prompt),
            argmax_changed: baseline.argmax != intervened.argmax,
            baseline,
            intervened,
            applied: self.applied.clone(),
            watched,
        })
    }
}

/// Applies `plan` and reports baseline versus intervened outputs.
pub fn apply(
    model: &Model,
    bank: &TranscoderBank,
    image: &ImageGrid,
    prompt: &[usize],
    plan: &InterventionPlan,
    donor: Option<&DonorRun>,
    watch: &[WatchedFeature],
) -> Result<InterventionReport> {
    run_plan(model, bank, image, prompt, plan, donor)?.report(image, prompt, watch)
}

/// Zeroes `suppress` and copies `scale ×` donor values onto `copy`, each a
/// `[layer, pos, feature]` triple.
#[allow(clippy::too_many_arguments)]
pub fn circuit_patch(
    model: &Model,
    bank: &TranscoderBank,
    image: &ImageGrid,
    prompt: &[usize],
    donor: &DonorRun,
    copy: &[[usize; 3]],
    suppress: &[[usize; 3]],
    scale: f32,
    watch: &[WatchedFeature],
) -> Result<InterventionReport> {
    let plan = InterventionPlan {
        clamps: Vec::new(),
        donor: Some(DonorSpec {
            trace: donor.trace_id.clone(),
            copy: copy.to_vec(),
            suppress: suppress.to_vec(),
            scale,
        }),
    };
    apply(model, bank, image, prompt, &plan, Some(donor), watch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f32,
    pub top: Vec<TokenProb>,
}

/// One clamp of `site = (layer, pos, feature)` per value.
pub fn steer_sweep(
    model: &Model,
    bank: &TranscoderBank,
    image: &ImageGrid,
    prompt: &[usize],
    site: (usize, usize, usize),
    values: &[f32],
) -> Result<Vec<SweepPoint>> {
    values
        .iter()
        .map(|&v| {
            let plan = InterventionPlan {
                clamps: vec![Clamp {
                    layer: site.0,
                    pos: Positions::One(site.1),
                    feature: site.2,
                    value: v,
                }],
                donor: None,
            };
            let run = run_plan(model, bank, image, prompt, &plan, None)?;
            Ok(SweepPoint {
                value: v,
                top: top_tokens(&run.logits, 3),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_json_shapes() {
        let p = InterventionPlan::from_json(
            r#"{"clamps":[{"layer":1,"pos":[3,4],"feature":7,"value":0}],
                "donor":{"trace":"ab","copy":[[1,2,3]],"suppress":[[0,1,2]]}}"#,
        )
        .unwrap();
        assert_eq!(p.clamps[0].pos.to_vec(), vec![3, 4]);
        assert_eq!(p.donor.as_ref().unwrap().scale, 1.0);
        let p = InterventionPlan::from_json(r#"{"clamps":[{"layer":0,"pos":2,"feature":1,"value":1.5}]}"#).unwrap();
        assert_eq!(p.clamps[0].pos, Positions::One(2));
        assert!(InterventionPlan::from_json(r#"{"clamps":[],"extra":1}"#).is_err());
        assert!(InterventionPlan::from_json("{}").unwrap().is_empty());
    }

    #[test]
    fn plan_round_trips() {
        let p = InterventionPlan {
            clamps: vec![Clamp {
                layer: 0,
                pos: Positions::Many(vec![1, 2]),
                feature: 3,
                value: -2.5,
            }],
            donor: Some(DonorSpec {
                trace: "x".into(),
                copy: vec![[0, 1, 2]],
                suppress: vec![],
                scale: 2.0,
            }),
        };
        let back = InterventionPlan::from_json(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn top_tokens_sorted_and_tie_broken() {
        let top = top_tokens(&[1.0, 3.0, 3.0, 0.0], 3);
        assert_eq!(top.iter().map(|t| t.token).collect::<Vec<_>>(), vec![1, 2, 0]);
    }
}
