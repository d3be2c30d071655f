// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;

use cloom_core::features::{inject_curated, scan, ActivationStore, Dataset, ScanConfig, Scope};
use cloom_core::transcoder::replacement_forward;
use cloom_core::vlm::SyntheticSample;
use common::fixture;

/// Per `(layer, feature)`: active token count, activation sum, and the best
/// `(activation, sample index, pos)`.
fn brute_force(samples: &[SyntheticSample]) -> BTreeMap<(usize, usize), (usize, f64, (f32, usize, usize))> {
    let f = fixture();
    let mut out: BTreeMap<(usize, usize), (usize, f64, (f32, usize, usize))> = BTreeMap::new();
    for (si, s) in samples.iter().enumerate() {
        let rep = replacement_forward(&f.ck.model, &f.bank, &s.image, &s.prompt, true).unwrap();
        for (l, lt) in rep.trace.layers.iter().enumerate() {
            let tc = &f.bank.transcoders[l];
            for p in 0..rep.trace.seq_len {
                let pre = tc.preactivations(lt.mlp_in.row(p));
                let mut order: Vec<usize> = (0..pre.len()).collect();
                order.sort_by(|&a, &b| pre[b].partial_cmp(&pre[a]).unwrap().then(a.cmp(&b)));
                for &i in order.iter().take(tc.k) {
                    let z = pre[i].max(0.0);
                    if z <= 0.0 {
                        continue;
                    }
                    let e = out.entry((l, i)).or_insert((0, 0.0, (f32::MIN, 0, 0)));
                    e.0 += 1;
                    e.1 += z as f64;
                    if z > e.2 .0 {
                        e.2 = (z, si, p);
                    }
                }
            }
        }
    }
    out
}

fn data(range: std::ops::Range<usize>) -> Dataset {
    Dataset::new("heldout", fixture().heldout[range].to_vec()).unwrap()
}

#[test]
fn counts_match_brute_force() {
    let f = fixture();
    let ds = data(0..12);
    let store = scan(&f.ck, &f.bank, &ds, Scope::All, ScanConfig::default()).unwrap();
    let want = brute_force(&f.heldout[0..12]);
    let mut n_active = 0;
    for (&(l, feat), st) in &store.stats {
        match want.get(&(l, feat)) {
            None => assert_eq!(st.active_tokens, 0, "{l}/{feat}"),
            Some(&(n, sum, (zmax, si, p))) => {
                n_active += 1;
                assert_eq!(st.active_tokens, n, "{l}/{feat}");
                assert!((st.sum_activation - sum).abs() <= 1e-6 * sum.max(1.0));
                assert_eq!(st.positions.total(), n);
                let prof = store.profile(l, feat, 1).unwrap();
                let top = &prof.top[0];
                assert_eq!(top.activation, zmax);
                assert_eq!((top.sample.as_str(), top.pos), (ds.sample_id(si).as_str(), p));
            }
        }
    }
    assert!(n_active > 10);
    let tokens: usize = f.heldout[0..12].iter().map(|s| f.ck.config().n_image_tokens + s.prompt.len()).sum();
    assert_eq!(store.manifest.n_tokens, tokens);
}

#[test]
fn rescans_are_idempotent() {
    let f = fixture();
    let ds = data(0..6);
    let mut store = scan(&f.ck, &f.bank, &ds, Scope::All, ScanConfig::default()).unwrap();
    let before = store.clone();
    store.scan_dataset(&f.ck, &f.bank, &ds).unwrap();
    assert_eq!(store, before);
}

#[test]
fn scans_compose() {
    let f = fixture();
    let scope = Scope::Features(vec![(0, 1), (1, 5), (2, 9), (3, 0)]);
    let whole = scan(&f.ck, &f.bank, &data(0..10), scope.clone(), ScanConfig::default()).unwrap();
    let mut parts = scan(&f.ck, &f.bank, &data(0..4), scope, ScanConfig::default()).unwrap();
    inject_curated(&mut parts, &f.ck, &f.bank, &data(4..10)).unwrap();
    assert_eq!(parts.stats, whole.stats);
    assert_eq!(parts.manifest.n_tokens, whole.manifest.n_tokens);
    for key in whole.stats.keys() {
        let a: Vec<_> = whole.examples.get(key).into_iter().flatten().map(|e| (e.activation, e.pos)).collect();
        let b: Vec<_> = parts.examples.get(key).into_iter().flatten().map(|e| (e.activation, e.pos)).collect();
        assert_eq!(a, b, "{key:?}");
    }
}

#[test]
fn injection_lifts_a_feature() {
    let f = fixture();
    let base = scan(&f.ck, &f.bank, &data(0..8), Scope::All, ScanConfig::default()).unwrap();
    let pool = &f.heldout[8..40];
    // The feature whose best pool example most exceeds its best scanned one.
    let ((l, feat), (_, _, (zmax, si, pos))) = brute_force(pool)
        .into_iter()
        .filter(|(k, _)| base.stats[k].active_tokens > 0)
        .max_by(|a, b| {
            let gap = |k: &(usize, usize), z: f32| z - base.profile(k.0, k.1, 1).unwrap().top[0].activation;
            gap(&a.0, a.1 .2 .0).partial_cmp(&gap(&b.0, b.1 .2 .0)).unwrap()
        })
        .unwrap();
    let before = base.profile(l, feat, 3).unwrap();
    assert!(zmax > before.top[0].activation, "no pool sample beats the scan");

    let curated = Dataset::new("curated", vec![pool[si].clone()]).unwrap();
    let (n_cur, sum_cur, _) = brute_force(std::slice::from_ref(&pool[si]))[&(l, feat)];
    let mut store = base.clone();
    inject_curated(&mut store, &f.ck, &f.bank, &curated).unwrap();
    let after = store.profile(l, feat, 3).unwrap();
    let st = &base.stats[&(l, feat)];
    let want_mean = (st.sum_activation + sum_cur) / (st.active_tokens + n_cur) as f64;
    assert_eq!(after.active_tokens, before.active_tokens + n_cur);
    assert!((after.mean_activation - want_mean).abs() < 1e-9);
    assert!(after.mean_activation > before.mean_activation);
    assert_eq!(after.top[0].activation, zmax);
    assert_eq!((after.top[0].sample.as_str(), after.top[0].pos), (curated.sample_id(0).as_str(), pos));
}

#[test]
fn store_persists() {
    let f = fixture();
    let store = scan(&f.ck, &f.bank, &data(0..4), Scope::All, ScanConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path()).unwrap();
    assert_eq!(ActivationStore::load(dir.path()).unwrap(), store);
}

#[test]
fn scope_is_enforced() {
    let f = fixture();
    let store = scan(&f.ck, &f.bank, &data(0..2), Scope::Features(vec![(1, 3)]), ScanConfig::default()).unwrap();
    assert!(store.contains(1, 3));
    assert!(store.profile(1, 4, 5).is_err());
    assert!(ActivationStore::new(&f.ck, &f.bank, Scope::Features(vec![(7, 0)]), ScanConfig::default()).is_err());
    let mut other = f.ck.clone();
    other.model.weights.unembed.data_mut()[0] += 1.0;
    let mut s2 = store.clone();
    assert!(inject_curated(&mut s2, &other, &f.bank, &data(2..3)).is_err());
}
