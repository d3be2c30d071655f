// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use cloom_core::intervention::{
    apply, circuit_patch, run_plan, steer_sweep, Clamp, DonorRun, EditKind, InterventionPlan, Positions,
    WatchedFeature,
};
use cloom_core::vlm::SyntheticSample;
use common::fixture;

fn clamp(layer: usize, pos: usize, feature: usize, value: f32) -> InterventionPlan {
    InterventionPlan {
        clamps: vec![Clamp {
            layer,
            pos: Positions::One(pos),
            feature,
            value,
        }],
        donor: None,
    }
}

/// An active `(feature, z)` at `(layer, pos)` of the sample's replacement pass.
fn active(s: &SyntheticSample, layer: usize, pos: usize) -> (usize, f32) {
    let f = fixture();
    let run = run_plan(&f.ck.model, &f.bank, &s.image, &s.prompt, &InterventionPlan::default(), None).unwrap();
    let c = &run.baseline_codes[layer][pos];
    (c.indices[0], c.values[0])
}

#[test]
fn empty_plan_is_a_bitwise_no_op() {
    let f = fixture();
    for s in f.heldout.iter().take(5) {
        let (orig, _) = f.ck.model.forward(&s.image, &s.prompt, false).unwrap();
        let watch = [WatchedFeature { layer: 2, feature: 3, pos: None }];
        let r = apply(&f.ck.model, &f.bank, &s.image, &s.prompt, &InterventionPlan::default(), None, &watch).unwrap();
        assert_eq!(r.baseline.logits, orig);
        assert_eq!(r.intervened.logits, orig);
        assert_eq!(r.baseline, r.intervened);
        assert!(r.applied.is_empty());
        assert_eq!(r.watched[0].delta, 0.0);
        assert!(!r.argmax_changed);
    }
}

#[test]
fn clamping_to_the_live_value_changes_nothing() {
    let f = fixture();
    let s = &f.heldout[0];
    let p = f.ck.config().n_image_tokens + 1;
    let (feat, z) = active(s, 1, p);
    let run = run_plan(&f.ck.model, &f.bank, &s.image, &s.prompt, &clamp(1, p, feat, z), None).unwrap();
    assert_eq!(run.logits, run.baseline_logits);
    assert_eq!(run.applied[0].delta, 0.0);
    assert_eq!(run.applied[0].z, z);
}

#[test]
fn edits_only_reach_later_layers_and_positions() {
    let f = fixture();
    let s = &f.heldout[1];
    let n_img = f.ck.config().n_image_tokens;
    let p = n_img + 1;
    let (feat, z) = active(s, 1, p);
    let run = run_plan(&f.ck.model, &f.bank, &s.image, &s.prompt, &clamp(1, p, feat, z + 5.0), None).unwrap();
    let t = run.trace.seq_len;
    for l in 0..run.codes.len() {
        for q in 0..t {
            let same = run.codes[l][q] == run.baseline_codes[l][q];
            if l == 0 || q < p {
                assert!(same, "layer {l} pos {q} changed");
            }
            if l == 1 && q != p {
                assert!(same, "layer 1 pos {q} changed");
            }
        }
    }
    assert_ne!(run.logits, run.baseline_logits);
    assert_eq!(run.applied[0].kind, EditKind::Clamp);
    assert!((run.applied[0].delta - 5.0).abs() < 1e-6);
}

#[test]
fn self_patch_is_identity() {
    let f = fixture();
    let s = &f.heldout[2];
    let donor = DonorRun::capture(&f.ck.model, &f.bank, &s.image, &s.prompt).unwrap();
    let copy: Vec<[usize; 3]> = donor
        .codes
        .iter()
        .enumerate()
        .flat_map(|(l, row)| row.iter().enumerate().flat_map(move |(p, c)| c.indices.iter().map(move |&i| [l, p, i])))
        .collect();
    assert!(copy.len() > 100);
    let r = circuit_patch(&f.ck.model, &f.bank, &s.image, &s.prompt, &donor, &copy, &[], 1.0, &[]).unwrap();
    assert_eq!(r.baseline.logits, r.intervened.logits);
    assert!(r.applied.iter().all(|e| e.delta == 0.0 && e.kind == EditKind::Copy));
}

#[test]
fn copying_an_inactive_donor_feature_equals_suppression() {
    let f = fixture();
    let (target, other) = (&f.heldout[3], &f.heldout[4]);
    let donor = DonorRun::capture(&f.ck.model, &f.bank, &other.image, &other.prompt).unwrap();
    let p = f.ck.config().n_image_tokens;
    let (feat, _) = active(target, 2, p);
    assert_eq!(donor.codes[2][p].get(feat), 0.0, "pick a feature the donor lacks");
    let site = [[2, p, feat]];
    let copied = circuit_patch(&f.ck.model, &f.bank, &target.image, &target.prompt, &donor, &site, &[], 1.0, &[]).unwrap();
    let zeroed = apply(&f.ck.model, &f.bank, &target.image, &target.prompt, &clamp(2, p, feat, 0.0), None, &[]).unwrap();
    let suppressed = circuit_patch(&f.ck.model, &f.bank, &target.image, &target.prompt, &donor, &[], &site, 1.0, &[]).unwrap();
    assert_eq!(copied.intervened.logits, zeroed.intervened.logits);
    assert_eq!(suppressed.intervened.logits, zeroed.intervened.logits);
    assert_eq!(suppressed.applied[0].kind, EditKind::Suppress);
}

#[test]
fn sweeps_are_repeatable_and_match_single_runs() {
    let f = fixture();
    let s = &f.heldout[5];
    let p = s.prompt.len() + f.ck.config().n_image_tokens - 1;
    let (feat, z) = active(s, 3, p);
    let pts = steer_sweep(&f.ck.model, &f.bank, &s.image, &s.prompt, (3, p, feat), &[4.0, 4.0, 4.0, 0.0, z]).unwrap();
    assert_eq!(pts[0], pts[1]);
    assert_eq!(pts[1], pts[2]);
    let ablate = apply(&f.ck.model, &f.bank, &s.image, &s.prompt, &clamp(3, p, feat, 0.0), None, &[]).unwrap();
    assert_eq!(pts[3].top, ablate.intervened.top[..3]);
    assert_eq!(pts[4].top, ablate.baseline.top[..3]);
}

#[test]
fn watched_features_report_shifts() {
    let f = fixture();
    let s = &f.heldout[6];
    let p = f.ck.config().n_image_tokens + 1;
    let (feat, z) = active(s, 2, p);
    let watch = [
        WatchedFeature { layer: 2, feature: feat, pos: Some(p) },
        WatchedFeature { layer: 2, feature: feat, pos: None },
    ];
    let r = apply(&f.ck.model, &f.bank, &s.image, &s.prompt, &clamp(2, p, feat, z + 2.0), None, &watch).unwrap();
    // Watches read codes before the edit writes, so the site itself is unchanged.
    assert_eq!(r.watched[0].baseline, z);
    assert_eq!(r.watched[0].delta, r.watched[0].intervened - r.watched[0].baseline);
    assert!(r.watched[1].baseline >= z);
}

#[test]
fn invalid_plans_are_rejected() {
    let f = fixture();
    let s = &f.heldout[0];
    let t = f.ck.config().n_image_tokens + s.prompt.len();
    let d_feat = f.bank.meta.d_feat;
    let bad = [
        clamp(9, 0, 0, 1.0),
        clamp(0, t, 0, 1.0),
        clamp(0, 0, d_feat, 1.0),
        clamp(0, 0, 0, f32::NAN),
        InterventionPlan {
            clamps: vec![
                Clamp { layer: 0, pos: Positions::Many(vec![1, 2]), feature: 0, value: 1.0 },
                Clamp { layer: 0, pos: Positions::One(2), feature: 0, value: 3.0 },
            ],
            donor: None,
        },
        InterventionPlan {
            clamps: vec![Clamp { layer: 0, pos: Positions::Many(vec![]), feature: 0, value: 1.0 }],
            donor: None,
        },
    ];
    for plan in &bad {
        assert!(apply(&f.ck.model, &f.bank, &s.image, &s.prompt, plan, None, &[]).is_err(), "{plan:?}");
    }
    assert!(InterventionPlan::from_json(r#"{"clamps":[{"layer":0,"pos":0,"feature":0,"value":1,"extra":2}]}"#).is_err());
    let needs_donor = InterventionPlan::from_json(r#"{"donor":{"trace":"abc","copy":[[0,0,0]]}}"#).unwrap();
    assert!(apply(&f.ck.model, &f.bank, &s.image, &s.prompt, &needs_donor, None, &[]).is_err());
}
