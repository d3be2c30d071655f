// SPDX-License-Identifier: MIT OR Apache-2.0

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::graph::{
    embedding_id, error_id, feature_id, logit_id, AdditivityReport, AttributionGraph, GraphEdge, GraphMeta,
    GraphNode, NodeKind, PruneConfig,
};
use super::linear::{Linearization, NodeRef};
use crate::container::sha256_hex;
use crate::error::{CloomError, Result};
use crate::transcoder::{replacement_forward, ReplacementOutput, TranscoderBank};
use crate::vlm::model::softmax;
use crate::vlm::{vocab, ImageGrid, Model, ModelCheckpoint};

/// Provenance recorded in the graph metadata.
#[derive(Debug, Clone, Default)]
pub struct GraphContext {
    pub prompt: String,
    pub model_hash: String,
    pub bank_hash: String,
}

/// Stable identifier of an `(image, prompt)` input.
pub fn trace_id(image: &ImageGrid, tokens: &[usize]) -> String {
    let mut bytes = Vec::with_capacity(image.data.len() * 4 + tokens.len() * 8);
    for v in &image.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for t in tokens {
        bytes.extend_from_slice(&(*t as u64).to_le_bytes());
    }
    sha256_hex(&bytes)[..16].to_string()
}

/// Logit tokens by descending probability until `mass` is covered, at most
/// `max` of them.
pub fn select_logits(probs: &[f32], mass: f64, max: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut out = Vec::new();
    let mut cum = 0.0f64;
    for tok in order {
        if out.len() >= max || cum >= mass {
            break;
        }
        cum += probs[tok] as f64;
        out.push((tok, probs[tok] as f64));
    }
    out
}

/// Replacement pass plus graph construction, with the bank checked against
/// the checkpoint it was trained on.
pub fn trace_prompt(
    ck: &ModelCheckpoint,
    bank: &TranscoderBank,
    image: &ImageGrid,
    prompt: &str,
    cfg: &PruneConfig,
) -> Result<(AttributionGraph, ReplacementOutput)> {
    let model_hash = ck.hash()?;
    if bank.meta.model_hash != model_hash {
        return Err(CloomError::InvalidArgument(format!(
            "bank was trained against checkpoint {}, not {}",
            short(&bank.meta.model_hash),
            short(&model_hash)
        )));
    }
    if bank.stats.iter().all(|s| s.curve.is_empty()) {
        return Err(CloomError::InvalidArgument("bank has no training record".into()));
    }
    let tokens = vocab::encode_prompt(prompt)?;
    let rep = replacement_forward(&ck.model, bank, image, &tokens, true)?;
    let ctx = GraphContext {
        prompt: prompt.to_string(),
        model_hash,
        bank_hash: bank.hash()?,
    };
    let g = build_graph(&ck.model, bank, &rep, image, cfg, &ctx)?;
    Ok((g, rep))
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

struct Dense {
    nodes: Vec<GraphNode>,
    /// Incoming `(source index, A)` per node.
    incoming: Vec<Vec<(usize, f64)>>,
}

/// All nodes and all nonzero edges of the unpruned graph.
fn dense_graph(model: &Model, bank: &TranscoderBank, rep: &ReplacementOutput, cfg: &PruneConfig) -> Result<Dense> {
    if !rep.with_error_nodes {
        return Err(CloomError::IncompleteTrace(
            "graph construction needs a replacement pass with error nodes".into(),
        ));
    }
    let lin = Linearization::new(model, bank, &rep.trace)?.with_errors(&rep.errors)?;
    let trace = &rep.trace;
    let (t, nl, d) = (trace.seq_len, trace.n_layers(), model.config.d_model);
    let mut nodes = Vec::new();
    let text_token = |pos: usize| (pos >= trace.n_image).then(|| trace.tokens[pos - trace.n_image]);

    for pos in 0..t {
        let a = trace.embeddings.row(pos).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        nodes.push(GraphNode {
            id: embedding_id(pos),
            kind: NodeKind::Embedding,
            layer: None,
            pos,
            feature: None,
            activation: a,
            token: text_token(pos),
            prob: None,
            label: None,
            preact: None,
            bias: None,
            in_mass: None,
            influence: None,
        });
    }
    // Targets grouped by (layer, position): (node index, encoder row).
    let mut by_site: BTreeMap<(usize, usize), Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    for l in 0..nl {
        for pos in 0..t {
            let code = &rep.codes[l][pos];
            for (&f, &z) in code.indices.iter().zip(&code.values) {
                let r = NodeRef::Feature {
                    layer: l,
                    pos,
                    feature: f,
                };
                by_site
                    .entry((l, pos))
                    .or_default()
                    .push((nodes.len(), lin.encoder(l, f)?));
                nodes.push(GraphNode {
                    id: feature_id(l, pos, f),
                    kind: NodeKind::Feature,
                    layer: Some(l),
                    pos,
                    feature: Some(f),
                    activation: z as f64,
                    token: None,
                    prob: None,
                    label: None,
                    preact: Some(lin.target_preactivation(r)?),
                    bias: Some(bank.layer(l)?.b_enc.data()[f] as f64),
                    in_mass: None,
                    influence: None,
                });
            }
        }
        for pos in 0..t {
            let e = &rep.errors[l * t + pos].e;
            let a = e.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            nodes.push(GraphNode {
                id: error_id(l, pos),
                kind: NodeKind::Error,
                layer: Some(l),
                pos,
                feature: None,
                activation: a,
                token: None,
                prob: None,
                label: None,
                preact: None,
                bias: None,
                in_mass: None,
                influence: None,
            });
        }
    }
    let probs = softmax(&trace.logits);
    let mut logits = Vec::new();
    for (tok, p) in select_logits(&probs, cfg.logit_mass, cfg.max_logits) {
        let r = NodeRef::Logit { token: tok };
        logits.push((nodes.len(), lin.logit_direction(tok)?));
        nodes.push(GraphNode {
            id: logit_id(tok),
            kind: NodeKind::Logit,
            layer: None,
            pos: t - 1,
            feature: None,
            activation: trace.logits[tok] as f64,
            token: Some(tok),
            prob: Some(p),
            label: Some(vocab::word(tok).to_string()),
            preact: Some(lin.target_preactivation(r)?),
            bias: Some(0.0),
            in_mass: None,
            influence: None,
        });
    }

    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nodes.len()];
    let read = |deltas: &super::linear::JvpDeltas, out: &mut dyn FnMut(usize, f64)| {
        for l in deltas.boundary..nl {
            for pos in (0..t).filter(|&p| deltas.support[l][p]) {
                if let Some(targets) = by_site.get(&(l, pos)) {
                    let row = deltas.mlp_in_row(l, pos, d);
                    for (ti, enc) in targets {
                        out(*ti, enc.iter().zip(row).map(|(a, b)| a * b).sum());
                    }
                }
            }
        }
        for (ti, dir) in &logits {
            out(*ti, dir.iter().zip(&deltas.final_normed).map(|(a, b)| a * b).sum());
        }
    };

    for si in 0..nodes.len() {
        let node = &nodes[si];
        if !matches!(node.kind, NodeKind::Embedding | NodeKind::Feature | NodeKind::Error) || node.activation == 0.0 {
            continue;
        }
        let (site, dir, a) = lin.source_write(node.node_ref())?;
        let write: Vec<f64> = dir.iter().map(|v| v * a).collect();
        let deltas = lin.frozen_jvp(site.boundary, &[(site.position, write)])?;
        read(&deltas, &mut |ti, val| {
            if val != 0.0 {
                incoming[ti].push((si, val));
            }
        });
    }

    // Decoder biases of every layer, written at every position, fold into
    // the constant term of each target.
    let mut bias_add = vec![0.0f64; nodes.len()];
    for l in 0..nl {
        let b: Vec<f64> = bank.layer(l)?.b_dec.data().iter().map(|&v| v as f64).collect();
        let writes: Vec<(usize, Vec<f64>)> = (0..t).map(|p| (p, b.clone())).collect();
        let deltas = lin.frozen_jvp(l + 1, &writes)?;
        read(&deltas, &mut |ti, val| bias_add[ti] += val);
    }
    for (n, add) in nodes.iter_mut().zip(bias_add) {
        if let Some(b) = n.bias.as_mut() {
            *b += add;
        }
    }
    for (n, inc) in nodes.iter_mut().zip(&incoming) {
        if matches!(n.kind, NodeKind::Feature | NodeKind::Logit) {
            n.in_mass = Some(inc.iter().map(|(_, a)| a.abs()).sum());
        }
    }
    Ok(Dense { nodes, incoming })
}

/// Influence of every node on the logit nodes: logits start at their
/// normalized probability and each target passes its influence back to its
/// sources in proportion to `|A| / Σ|A|`.
fn influence(dense: &Dense, n_layers: usize) -> Vec<f64> {
    let nodes = &dense.nodes;
    let mut infl = vec![0.0f64; nodes.len()];
    let total_p: f64 = nodes.iter().filter_map(|n| n.prob).sum();
    for (i, n) in nodes.iter().enumerate() {
        if let (NodeKind::Logit, Some(p)) = (n.kind, n.prob) {
            infl[i] = if total_p > 0.0 { p / total_p } else { 0.0 };
        }
    }
    let mut order: Vec<usize> = (0..nodes.len())
        .filter(|&i| matches!(nodes[i].kind, NodeKind::Feature | NodeKind::Logit))
        .collect();
    let read_stage = |n: &GraphNode| match n.kind {
        NodeKind::Logit => n_layers + 1,
        _ => n.layer.unwrap_or(0),
    };
    order.sort_by(|&a, &b| read_stage(&nodes[b]).cmp(&read_stage(&nodes[a])).then(a.cmp(&b)));
    for ti in order {
        let w = infl[ti];
        let mass = nodes[ti].in_mass.unwrap_or(0.0);
        if w == 0.0 || mass == 0.0 {
            continue;
        }
        for &(si, a) in &dense.incoming[ti] {
            infl[si] += w * a.abs() / mass;
        }
    }
    infl
}

fn by_magnitude(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.abs().partial_cmp(&a.1.abs()).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Builds the pruned attribution graph of a replacement pass.
pub fn build_graph(
    model: &Model,
    bank: &TranscoderBank,
    rep: &ReplacementOutput,
    image: &ImageGrid,
    cfg: &PruneConfig,
    ctx: &GraphContext,
) -> Result<AttributionGraph> {
    let nl = rep.trace.n_layers();
    let mut dense = dense_graph(model, bank, rep, cfg)?;
    let infl = influence(&dense, nl);
    for (n, v) in dense.nodes.iter_mut().zip(&infl) {
        n.influence = Some(*v);
    }

    let mut feats: Vec<usize> = (0..dense.nodes.len())
        .filter(|&i| dense.nodes[i].kind == NodeKind::Feature)
        .collect();
    feats.sort_by(|&a, &b| infl[b].partial_cmp(&infl[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let total: f64 = feats.iter().map(|&i| infl[i]).sum();
    let mut keep = vec![false; dense.nodes.len()];
    let mut kept_mass = 0.0f64;
    let mut n_kept = 0usize;
    for &i in &feats {
        let reached = if cfg.node_threshold >= 1.0 {
            false
        } else {
            kept_mass >= cfg.node_threshold * total
        };
        if reached || n_kept >= cfg.max_feature_nodes {
            break;
        }
        keep[i] = true;
        kept_mass += infl[i];
        n_kept += 1;
    }
    let retained_influence = if total > 0.0 { kept_mass / total } else { 1.0 };

    let mut is_target = vec![false; dense.nodes.len()];
    for (i, n) in dense.nodes.iter().enumerate() {
        if n.kind == NodeKind::Logit || keep[i] {
            keep[i] = true;
            is_target[i] = true;
        }
    }
    let mut kept_edges: Vec<(usize, usize, f64)> = Vec::new();
    for ti in (0..dense.nodes.len()).filter(|&i| is_target[i]) {
        let mut inc = dense.incoming[ti].clone();
        inc.sort_by(by_magnitude);
        let mass = dense.nodes[ti].in_mass.unwrap_or(0.0);
        let mut cum = 0.0f64;
        for (si, a) in inc {
            if cfg.edge_threshold < 1.0 && cum >= cfg.edge_threshold * mass {
                break;
            }
            cum += a.abs();
            if a.abs() < cfg.epsilon {
                continue;
            }
            kept_edges.push((si, ti, a));
        }
    }
    for &(si, _, _) in &kept_edges {
        keep[si] = true;
    }

    let id_of: BTreeMap<usize, String> = (0..keep.len())
        .filter(|&i| keep[i])
        .map(|i| (i, dense.nodes[i].id.clone()))
        .collect();
    let mut nodes = Vec::new();
    for (i, mut n) in dense.nodes.into_iter().enumerate() {
        if !keep[i] {
            continue;
        }
        if !is_target[i] {
            n.preact = None;
            n.bias = None;
            n.in_mass = None;
        }
        nodes.push(n);
    }
    kept_edges.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    let edges: Vec<GraphEdge> = kept_edges
        .into_iter()
        .map(|(s, t, a)| GraphEdge {
            src: id_of[&s].clone(),
            dst: id_of[&t].clone(),
            a,
        })
        .collect();

    let logit_mass = nodes.iter().filter_map(|n| n.prob).sum();
    let mut graph = AttributionGraph {
        meta: GraphMeta {
            prompt: ctx.prompt.clone(),
            tokens: rep.trace.tokens.clone(),
            n_image: rep.trace.n_image,
            n_layers: nl,
            trace_id: trace_id(image, &rep.trace.tokens),
            model_hash: ctx.model_hash.clone(),
            bank_hash: ctx.bank_hash.clone(),
            thresholds: *cfg,
            additivity: AdditivityReport::default(),
            retained_influence,
            logit_mass,
            extra: BTreeMap::new(),
        },
        nodes,
        edges,
    };
    graph.meta.additivity = additivity_report(&graph);
    Ok(graph)
}

/// Per-node check of `preact = bias + Σ incoming A` over the nodes whose
/// incoming edges were computed, plus the fraction of incoming `|A|` kept.
pub fn additivity_report(graph: &AttributionGraph) -> AdditivityReport {
    let mut sums: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for e in &graph.edges {
        let s = sums.entry(e.dst.as_str()).or_default();
        s.0 += e.a;
        s.1 += e.a.abs();
    }
    let mut rep = AdditivityReport {
        min_explained: 1.0,
        ..Default::default()
    };
    let mut sum_res = 0.0;
    let mut sum_expl = 0.0;
    for n in &graph.nodes {
        let (Some(pre), Some(bias), Some(mass)) = (n.preact, n.bias, n.in_mass) else {
            continue;
        };
        let (sa, sabs) = sums.get(n.id.as_str()).copied().unwrap_or((0.0, 0.0));
        let scale = mass + bias.abs();
        let res = (pre - bias - sa).abs();
        let rel = if scale > 0.0 { res / scale } else { res };
        let explained = if mass > 0.0 { sabs / mass } else { 1.0 };
        rep.n_nodes += 1;
        rep.max_rel_residual = rep.max_rel_residual.max(rel);
        rep.min_explained = rep.min_explained.min(explained);
        sum_res += rel;
        sum_expl += explained;
    }
    if rep.n_nodes > 0 {
        rep.mean_rel_residual = sum_res / rep.n_nodes as f64;
        rep.mean_explained = sum_expl / rep.n_nodes as f64;
    } else {
        rep.min_explained = 0.0;
    }
    rep
}
