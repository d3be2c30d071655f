// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use cloom_core::numeric::Tensor;
use cloom_core::rollout::{export_heatmaps, import_heatmaps, rollout, token_heatmaps, Geometry, RolloutConfig};
use cloom_core::vlm::VisionTrace;
use common::fixture;

fn vision(i: usize) -> VisionTrace {
    let f = fixture();
    let s = &f.heldout[i];
    f.ck.model.forward(&s.image, &s.prompt, true).unwrap().1.unwrap().vision
}

/// Brute force: entropies from scratch, heads by a full sort, explicit
/// residual normalization and a naive product in layer order.
fn reference(v: &VisionTrace, k: usize, q: f64) -> (Vec<f64>, Vec<Vec<usize>>) {
    let nl = v.attn.len();
    let mut r: Option<Vec<f64>> = None;
    let mut chosen = Vec::new();
    let mut n = 0;
    for att in &v.attn[nl - k..] {
        let (h, t) = (att.shape()[0], att.shape()[1]);
        n = t;
        let a = att.data();
        let ent: Vec<f64> = (0..h)
            .map(|hh| {
                (0..t)
                    .map(|i| {
                        -(0..t)
                            .map(|j| a[hh * t * t + i * t + j] as f64)
                            .filter(|&p| p > 0.0)
                            .map(|p| p * p.ln())
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / t as f64
            })
            .collect();
        let mut order: Vec<usize> = (0..h).collect();
        order.sort_by(|&x, &y| ent[x].partial_cmp(&ent[y]).unwrap().then(x.cmp(&y)));
        let m = (q * h as f64).ceil() as usize;
        let mut sel = order[..m].to_vec();
        sel.sort();
        let mut layer = vec![0.0f64; t * t];
        for &hh in &sel {
            for idx in 0..t * t {
                layer[idx] += a[hh * t * t + idx] as f64 / m as f64;
            }
        }
        for i in 0..t {
            layer[i * t + i] += 1.0;
            let s: f64 = layer[i * t..(i + 1) * t].iter().sum();
            layer[i * t..(i + 1) * t].iter_mut().for_each(|x| *x /= s);
        }
        r = Some(match r {
            None => layer,
            Some(prev) => {
                let mut out = vec![0.0; t * t];
                for i in 0..t {
                    for kk in 0..t {
                        for j in 0..t {
                            out[i * t + j] += prev[i * t + kk] * layer[kk * t + j];
                        }
                    }
                }
                out
            }
        });
        chosen.push(sel);
    }
    assert!(n > 0);
    (r.unwrap(), chosen)
}

#[test]
fn rollout_matches_brute_force() {
    for i in 0..4 {
        let v = vision(i);
        for (k, q) in [(1, 0.5), (2, 0.5), (2, 1.0), (1, 1.0)] {
            let cfg = RolloutConfig {
                k,
                q,
                ..RolloutConfig::default()
            };
            let got = rollout(&v, &cfg).unwrap();
            let (want, heads) = reference(&v, k, q);
            assert_eq!(got.heads, heads);
            let diff = got.matrix.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "k={k} q={q}: {diff}");
        }
    }
}

#[test]
fn rollout_rows_are_stochastic() {
    for i in 0..10 {
        let r = rollout(&vision(i), &RolloutConfig::default()).unwrap().matrix;
        for row in 0..r.n {
            let s: f64 = r.row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(r.row(row).iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn heatmaps_average_token_rows() {
    let v = vision(0);
    let r = rollout(&v, &RolloutConfig::default()).unwrap().matrix;
    let geom = Geometry::from_trace(&v);
    let set = token_heatmaps(&r, &geom, &RolloutConfig::default()).unwrap();
    let (gh, gw) = v.grid;
    let pb = v.pool_block;
    assert_eq!(set.maps.len(), (gh / pb) * (gw / pb));
    for m in set.maps.iter().step_by(7) {
        let (cy, cx) = m.cell;
        let mut row = vec![0.0f64; gh * gw];
        for dy in 0..pb {
            for dx in 0..pb {
                let p = (cy * pb + dy) * gw + cx * pb + dx;
                for (a, b) in row.iter_mut().zip(r.row(p)) {
                    *a += b;
                }
            }
        }
        let max = row.iter().copied().fold(0.0, f64::max);
        for (got, want) in m.data.iter().zip(&row) {
            assert!((*got as f64 - want / max).abs() < 1e-6);
        }
    }
}

#[test]
fn pooled_and_resized_maps() {
    let v = vision(1);
    let r = rollout(&v, &RolloutConfig::default()).unwrap().matrix;
    let cfg = RolloutConfig {
        b: 3,
        output: Some((30, 30)),
        ..RolloutConfig::default()
    };
    let set = token_heatmaps(&r, &Geometry::from_trace(&v), &cfg).unwrap();
    for m in &set.maps {
        assert_eq!((m.h, m.w), (30, 30));
        let max = m.data.iter().copied().fold(0.0f32, f32::max);
        assert!((max - 1.0).abs() < 1e-6);
        assert!(m.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
    let bad = RolloutConfig {
        b: 5,
        ..RolloutConfig::default()
    };
    assert!(token_heatmaps(&r, &Geometry::from_trace(&v), &bad).is_err());
}

#[test]
fn export_round_trips_within_quantization() {
    let v = vision(2);
    let r = rollout(&v, &RolloutConfig::default()).unwrap().matrix;
    let set = token_heatmaps(&r, &Geometry::from_trace(&v), &RolloutConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let index = export_heatmaps(&set, dir.path()).unwrap();
    assert_eq!(index.len(), set.maps.len());
    let back = import_heatmaps(dir.path()).unwrap();
    for (a, b) in set.maps.iter().zip(&back.maps) {
        assert_eq!((a.token, a.cell, a.h, a.w), (b.token, b.cell, b.h, b.w));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let v = vision(0);
    for cfg in [
        RolloutConfig { k: 0, ..Default::default() },
        RolloutConfig { k: 9, ..Default::default() },
        RolloutConfig { q: 0.0, ..Default::default() },
        RolloutConfig { q: 1.5, ..Default::default() },
    ] {
        assert!(rollout(&v, &cfg).is_err(), "{cfg:?}");
    }
    let mut broken = v.clone();
    let shape = broken.attn[1].shape().to_vec();
    broken.attn[1] = Tensor::zeros(&shape);
    assert!(rollout(&broken, &RolloutConfig::default()).is_err());
}
