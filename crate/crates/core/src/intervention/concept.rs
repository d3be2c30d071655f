// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept-selective features and cross-prompt concept swaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{run_plan, DonorRun, DonorSpec, InterventionPlan, InterventionReport, WatchedFeature};
use crate::error::{CloomError, Result};
use crate::transcoder::{replacement_forward, SparseCode, TranscoderBank};
use crate::vlm::{Model, SyntheticSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub layer: usize,
    pub feature: usize,
    /// Mean over in-concept samples of the maximum activation over positions.
    pub mean_in: f32,
    pub mean_out: f32,
    pub score: f32,
}

/// Features in `layers` ranked by how much more they fire on samples where
/// `is_concept` holds than elsewhere. At most `top_n`, all with positive score.
pub fn concept_features(
    model: &Model,
    bank: &TranscoderBank,
    samples: &[SyntheticSample],
    layers: &[usize],
    is_concept: &dyn Fn(&SyntheticSample) -> bool,
    top_n: usize,
) -> Result<Vec<ConceptScore>> {
    let nf = bank.meta.d_feat;
    let mut sums: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = layers.iter().map(|&l| (l, (vec![0.0; nf], vec![0.0; nf]))).collect();
    let (mut n_in, mut n_out) = (0usize, 0usize);
    for s in samples {
        let rep = replacement_forward(model, bank, &s.image, &s.prompt, true)?;
        let inside = is_concept(s);
        if inside {
            n_in += 1;
        } else {
            n_out += 1;
        }
        for (&l, (a_in, a_out)) in sums.iter_mut() {
            let row = rep
                .codes
                .get(l)
                .ok_or_else(|| CloomError::InvalidArgument(format!("layer {l} out of range")))?;
            let mut best = vec![0.0f32; nf];
            for c in row {
                for (&i, &v) in c.indices.iter().zip(&c.values) {
                    best[i] = best[i].max(v);
                }
            }
            let acc = if inside { &mut *a_in } else { &mut *a_out };
            for (a, b) in acc.iter_mut().zip(&best) {
                *a += *b as f64;
            }
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(CloomError::InvalidArgument(
            "concept selection needs samples both inside and outside the concept".into(),
        ));
    }
    let mut scores = Vec::new();
    for (&l, (a_in, a_out)) in &sums {
        for f in 0..nf {
            let mi = (a_in[f] / n_in as f64) as f32;
            let mo = (a_out[f] / n_out as f64) as f32;
            if mi > mo {
                scores.push(ConceptScore {
                    layer: l,
                    feature: f,
                    mean_in: mi,
                    mean_out: mo,
                    score: mi - mo,
                });
            }
        }
    }
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.layer, a.feature).cmp(&(b.layer, b.feature))));
    scores.truncate(top_n);
    Ok(scores)
}

/// Suppresses every active `(layer, feature)` of `suppress` in the target and
/// copies every active one of `copy` from the donor, at all positions.
pub fn swap_plan(
    target_codes: &[Vec<SparseCode>],
    donor: &DonorRun,
    suppress: &[(usize, usize)],
    copy: &[(usize, usize)],
    scale: f32,
) -> InterventionPlan {
    let active = |codes: &[Vec<SparseCode>], set: &[(usize, usize)]| {
        let mut out = Vec::new();
        for &(l, f) in set {
            if let Some(row) = codes.get(l) {
                for (p, c) in row.iter().enumerate() {
                    if c.get(f) > 0.0 {
                        out.push([l, p, f]);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    };
    let copy_keys = active(&donor.codes, copy);
    let suppress_keys = active(target_codes, suppress)
        .into_iter()
        .filter(|k| copy_keys.binary_search(k).is_err())
        .collect();
    InterventionPlan {
        clamps: Vec::new(),
        donor: Some(DonorSpec {
            trace: donor.trace_id.clone(),
            copy: copy_keys,
            suppress: suppress_keys,
            scale,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapTrial {
    pub plan: InterventionPlan,
    pub report: InterventionReport,
    pub expected: usize,
    pub flipped: bool,
}

/// Runs [`swap_plan`] from `donor` onto `target` and checks whether the
/// answer becomes `expected`.
#[allow(clippy::too_many_arguments)]
pub fn concept_swap(
    model: &Model,
    bank: &TranscoderBank,
    target: &SyntheticSample,
    donor: &SyntheticSample,
    suppress: &[(usize, usize)],
    copy: &[(usize, usize)],
    scale: f32,
    expected: usize,
    watch: &[WatchedFeature],
) -> Result<SwapTrial> {
    let donor_run = DonorRun::capture(model, bank, &donor.image, &donor.prompt)?;
    let base = replacement_forward(model, bank, &target.image, &target.prompt, true)?;
    let plan = swap_plan(&base.codes, &donor_run, suppress, copy, scale);
    let run = run_plan(model, bank, &target.image, &target.prompt, &plan, Some(&donor_run))?;
    let report = run.report(&target.image, &target.prompt, watch)?;
    let flipped = report.intervened.argmax == expected;
    Ok(SwapTrial {
        plan,
        report,
        expected,
        flipped,
    })
}
