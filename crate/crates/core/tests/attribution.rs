// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use cloom_core::attribution::{
    build_graph, export_graph, feature_id, import_graph, trace_prompt, AttributionGraph, GraphContext, NodeKind,
    PruneConfig,
};
use cloom_core::numeric::SeededRng;
use cloom_core::transcoder::replacement_forward;
use cloom_core::vlm::vocab::decode;
use cloom_core::CloomError;
use common::oracle::{source_of, target_of, Oracle};
use common::fixture;

fn unpruned(i: usize) -> (AttributionGraph, cloom_core::transcoder::ReplacementOutput) {
    let f = fixture();
    let s = &f.heldout[i];
    trace_prompt(&f.ck, &f.bank, &s.image, &decode(&s.prompt), &PruneConfig::unpruned()).unwrap()
}

#[test]
fn replacement_reproduces_logits() {
    let f = fixture();
    for s in f.heldout.iter().take(10) {
        let (orig, _) = f.ck.model.forward(&s.image, &s.prompt, false).unwrap();
        let rep = replacement_forward(&f.ck.model, &f.bank, &s.image, &s.prompt, true).unwrap();
        let diff = orig.iter().zip(&rep.logits).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "max logit difference {diff}");
    }
}

#[test]
fn oracle_reproduces_target_preactivations() {
    let f = fixture();
    let (g, rep) = unpruned(0);
    let oracle = Oracle::new(&f.ck.model, &f.bank, &rep);
    let base = oracle.run(None);
    for n in g.nodes.iter().filter(|n| target_of(n).is_some()) {
        let got = oracle.read(&base, target_of(n).unwrap());
        let want = n.preact.unwrap();
        assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0), "{}: {got} vs {want}", n.id);
    }
}

#[test]
fn edges_match_finite_differences() {
    let f = fixture();
    let mut rng = SeededRng::new(17);
    let mut checked = 0;
    for i in 0..3 {
        let (g, rep) = unpruned(i);
        let oracle = Oracle::new(&f.ck.model, &f.bank, &rep);
        let idx = g.index();
        let scale = g.edges.iter().map(|e| e.a.abs()).fold(0.0, f64::max);
        let big: Vec<_> = g.edges.iter().filter(|e| e.a.abs() > 1e-4 * scale).collect();
        for _ in 0..20 {
            let e = big[rng.below(big.len())];
            let s = source_of(&g.nodes[idx[e.src.as_str()]]).unwrap();
            let t = target_of(&g.nodes[idx[e.dst.as_str()]]).unwrap();
            let fd = oracle.edge(s, t, 1e-3);
            let rel = (fd - e.a).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-3, "{} -> {}: graph {} oracle {fd}", e.src, e.dst, e.a);
            checked += 1;
        }
    }
    assert_eq!(checked, 60);
}

#[test]
fn absent_edges_have_no_effect() {
    let f = fixture();
    let (g, rep) = unpruned(1);
    let oracle = Oracle::new(&f.ck.model, &f.bank, &rep);
    let idx = g.index();
    let src = g
        .nodes
        .iter()
        .find(|n| n.kind == NodeKind::Feature && n.layer == Some(1) && n.pos == g.meta.n_image)
        .expect("a layer-1 feature on the first text token");
    let connected: std::collections::BTreeSet<&str> =
        g.edges.iter().filter(|e| e.src == src.id).map(|e| e.dst.as_str()).collect();
    let s = source_of(src).unwrap();
    let up = oracle.run(Some((s, 1e-3)));
    let base = oracle.run(None);
    for n in g.nodes.iter().filter(|n| target_of(n).is_some() && !connected.contains(n.id.as_str())) {
        let t = target_of(n).unwrap();
        let diff = oracle.read(&up, t) - oracle.read(&base, t);
        assert!(diff.abs() < 1e-12, "{} moved {diff} without an edge", n.id);
    }
    assert!(idx.contains_key(src.id.as_str()));
}

#[test]
fn unpruned_graph_is_additive() {
    for i in 0..3 {
        let (g, _) = unpruned(i);
        let a = &g.meta.additivity;
        assert!(a.n_nodes > 0);
        assert!(a.max_rel_residual < 1e-5, "residual {}", a.max_rel_residual);
        assert!((a.min_explained - 1.0).abs() < 1e-12);
        assert!((g.meta.retained_influence - 1.0).abs() < 1e-12);
    }
}

#[test]
fn edges_respect_causality() {
    let (g, _) = unpruned(2);
    g.validate().unwrap();
    let idx = g.index();
    let n_img = g.meta.n_image;
    for e in &g.edges {
        let (s, t) = (&g.nodes[idx[e.src.as_str()]], &g.nodes[idx[e.dst.as_str()]]);
        if t.kind == NodeKind::Feature {
            let tl = t.layer.unwrap();
            if let Some(sl) = s.layer {
                assert!(sl < tl, "{} -> {}", s.id, t.id);
            }
            if t.pos >= n_img {
                assert!(s.pos <= t.pos, "{} -> {} reads the future", s.id, t.id);
            } else {
                assert!(s.pos < n_img, "image token {} reads text {}", t.id, s.id);
            }
        }
        assert_ne!(s.kind, NodeKind::Logit);
        assert!(!matches!(t.kind, NodeKind::Embedding | NodeKind::Error));
    }
}

#[test]
fn pruning_keeps_a_subset() {
    let f = fixture();
    let s = &f.heldout[0];
    let (full, rep) = unpruned(0);
    let ctx = GraphContext {
        prompt: decode(&s.prompt),
        model_hash: f.ck.hash().unwrap(),
        bank_hash: f.bank.hash().unwrap(),
    };
    let pruned = build_graph(&f.ck.model, &f.bank, &rep, &s.image, &PruneConfig::default(), &ctx).unwrap();
    let tight = PruneConfig {
        node_threshold: 0.5,
        edge_threshold: 0.8,
        ..PruneConfig::default()
    };
    let tighter = build_graph(&f.ck.model, &f.bank, &rep, &s.image, &tight, &ctx).unwrap();
    pruned.validate().unwrap();
    assert!(pruned.nodes.len() < full.nodes.len());
    assert!(tighter.n_features() <= pruned.n_features());
    let full_edges: std::collections::BTreeMap<(&str, &str), f64> =
        full.edges.iter().map(|e| ((e.src.as_str(), e.dst.as_str()), e.a)).collect();
    for e in &pruned.edges {
        assert_eq!(full_edges[&(e.src.as_str(), e.dst.as_str())], e.a);
    }
    let logits: Vec<_> = pruned.nodes.iter().filter(|n| n.kind == NodeKind::Logit).collect();
    assert!(!logits.is_empty() && logits.len() <= 10);
    assert!(pruned.meta.logit_mass >= 0.95 || logits.len() == 10);
    assert!(pruned.meta.retained_influence >= 0.8 - 1e-12);
}

#[test]
fn hand_computed_edge_without_attention() {
    let f = fixture();
    let mut model = f.ck.model.clone();
    for b in &mut model.weights.blocks {
        b.wo.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let s = &f.heldout[3];
    let rep = replacement_forward(&model, &f.bank, &s.image, &s.prompt, true).unwrap();
    let ctx = GraphContext {
        prompt: decode(&s.prompt),
        model_hash: String::new(),
        bank_hash: String::new(),
    };
    let g = build_graph(&model, &f.bank, &rep, &s.image, &PruneConfig::unpruned(), &ctx).unwrap();
    let p = rep.trace.seq_len - 1;
    let d = model.config.d_model;
    let den2 = rep.trace.layers[1].den_mlp.data()[p] as f64;
    let g2 = model.weights.blocks[1].ln2.data();
    let code0 = &rep.codes[0][p];
    let code1 = &rep.codes[1][p];
    assert!(!code0.indices.is_empty() && !code1.indices.is_empty());
    let (f0, z0) = (code0.indices[0], code0.values[0] as f64);
    let f1 = code1.indices[0];
    let dec = f.bank.transcoders[0].decoder_vector(f0);
    let enc = f.bank.transcoders[1].encoder_row(f1);
    let want: f64 = z0 * (0..d).map(|j| enc[j] as f64 * g2[j] as f64 * dec[j] as f64 / den2).sum::<f64>();
    let (src, dst) = (feature_id(0, p, f0), feature_id(1, p, f1));
    let got = g.edges.iter().find(|e| e.src == src && e.dst == dst).map_or(0.0, |e| e.a);
    assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-9), "{got} vs {want}");
    // With attention silenced nothing crosses positions.
    let idx = g.index();
    for e in &g.edges {
        let (a, b) = (&g.nodes[idx[e.src.as_str()]], &g.nodes[idx[e.dst.as_str()]]);
        if b.kind == NodeKind::Feature {
            assert_eq!(a.pos, b.pos, "{} -> {}", a.id, b.id);
        }
    }
}

#[test]
fn graph_json_round_trips() {
    let f = fixture();
    let s = &f.heldout[0];
    let (g, _) = trace_prompt(&f.ck, &f.bank, &s.image, &decode(&s.prompt), &PruneConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    export_graph(&g, &path).unwrap();
    let back = import_graph(&path).unwrap();
    assert_eq!(back, g);
    assert_eq!(back.to_json().unwrap(), std::fs::read_to_string(&path).unwrap());
}

#[test]
fn malformed_graphs_are_rejected() {
    let f = fixture();
    let s = &f.heldout[0];
    let (g, _) = trace_prompt(&f.ck, &f.bank, &s.image, &decode(&s.prompt), &PruneConfig::default()).unwrap();
    let good: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();

    let mut missing = good.clone();
    missing["nodes"][0].as_object_mut().unwrap().remove("kind");
    assert!(AttributionGraph::from_json(&missing.to_string()).is_err());

    let mut dangling = good.clone();
    dangling["edges"][0]["src"] = "feat/9/9/9999".into();
    assert!(matches!(AttributionGraph::from_json(&dangling.to_string()), Err(CloomError::Reference(_))));

    let mut backwards = good.clone();
    let first = backwards["edges"][0].clone();
    backwards["edges"][0]["src"] = first["dst"].clone();
    backwards["edges"][0]["dst"] = first["src"].clone();
    assert!(AttributionGraph::from_json(&backwards.to_string()).is_err());

    let mut nan = good;
    nan["edges"][0]["a"] = "NaN".into();
    assert!(AttributionGraph::from_json(&nan.to_string()).is_err());
    assert!(AttributionGraph::from_json("{").is_err());
}

#[test]
fn mismatched_bank_is_refused() {
    let f = fixture();
    let s = &f.heldout[0];
    let mut ck = f.ck.clone();
    ck.model.weights.unembed.data_mut()[0] += 1.0;
    let err = trace_prompt(&ck, &f.bank, &s.image, &decode(&s.prompt), &PruneConfig::default()).unwrap_err();
    assert!(matches!(err, CloomError::InvalidArgument(_)));
}
