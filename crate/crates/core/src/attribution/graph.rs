// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::linear::NodeRef;
use crate::error::{CloomError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Embedding,
    Feature,
    Error,
    Logit,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Embedding => "embedding",
            NodeKind::Feature => "feature",
            NodeKind::Error => "error",
            NodeKind::Logit => "logit",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "embedding" => NodeKind::Embedding,
            "feature" => NodeKind::Feature,
            "error" => NodeKind::Error,
            "logit" => NodeKind::Logit,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub layer: Option<usize>,
    pub pos: usize,
    pub feature: Option<usize>,
    /// `a_s`: latent value for features, norm of the written vector for
    /// embeddings and error nodes, the logit for logit nodes.
    pub activation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Pre-activation from the trace (features, logits).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preact: Option<f64>,
    /// Constant part of the pre-activation: encoder bias plus transcoder
    /// decoder biases carried through the frozen model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
    /// Total incoming `|A|` before pruning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_mass: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub influence: Option<f64>,
}

impl GraphNode {
    pub fn node_ref(&self) -> NodeRef {
        match self.kind {
            NodeKind::Embedding => NodeRef::Embedding { pos: self.pos },
            NodeKind::Feature => NodeRef::Feature {
                layer: self.layer.unwrap_or(0),
                pos: self.pos,
                feature: self.feature.unwrap_or(0),
            },
            NodeKind::Error => NodeRef::Error {
                layer: self.layer.unwrap_or(0),
                pos: self.pos,
            },
            NodeKind::Logit => NodeRef::Logit {
                token: self.token.unwrap_or(0),
            },
        }
    }

    /// Computation stage: 0 for embeddings, `l + 1` for layer-`l` features
    /// and errors as sources, `L + 1` for logits.
    pub fn stage(&self, n_layers: usize) -> usize {
        match self.kind {
            NodeKind::Embedding => 0,
            NodeKind::Feature | NodeKind::Error => self.layer.unwrap_or(0) + 1,
            NodeKind::Logit => n_layers + 1,
        }
    }
}

pub fn embedding_id(pos: usize) -> String {
    format!("emb/{pos}")
}

pub fn feature_id(layer: usize, pos: usize, feature: usize) -> String {
    format!("feat/{layer}/{pos}/{feature}")
}

pub fn error_id(layer: usize, pos: usize) -> String {
    format!("err/{layer}/{pos}")
}

pub fn logit_id(token: usize) -> String {
    format!("logit/{token}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: String,
    pub dst: String,
    pub a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub node_threshold: f64,
    pub edge_threshold: f64,
    pub max_feature_nodes: usize,
    pub logit_mass: f64,
    pub max_logits: usize,
    pub epsilon: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            node_threshold: 0.8,
            edge_threshold: 0.98,
            max_feature_nodes: 7500,
            logit_mass: 0.95,
            max_logits: 10,
            epsilon: 1e-6,
        }
    }
}

impl PruneConfig {
    /// Keeps every node and every edge.
    pub fn unpruned() -> Self {
        Self {
            node_threshold: 1.0,
            edge_threshold: 1.0,
            max_feature_nodes: usize::MAX,
            epsilon: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdditivityReport {
    pub n_nodes: usize,
    pub max_rel_residual: f64,
    pub mean_rel_residual: f64,
    pub mean_explained: f64,
    pub min_explained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub prompt: String,
    pub tokens: Vec<usize>,
    pub n_image: usize,
    pub n_layers: usize,
    pub trace_id: String,
    pub model_hash: String,
    pub bank_hash: String,
    pub thresholds: PruneConfig,
    pub additivity: AdditivityReport,
    /// Influence mass of retained feature nodes over all feature nodes.
    pub retained_influence: f64,
    /// Probability mass covered by the logit nodes.
    pub logit_mass: f64,
    #[serde(default)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionGraph {
    pub meta: GraphMeta,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl AttributionGraph {
    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }

    pub fn n_features(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Feature).count()
    }

    pub fn incoming(&self, id: &str) -> impl Iterator<Item = &GraphEdge> {
        let id = id.to_string();
        self.edges.iter().filter(move |e| e.dst == id)
    }

    /// Checks referential integrity and causal ordering of the edges.
    pub fn validate(&self) -> Result<()> {
        let idx = self.index();
        if idx.len() != self.nodes.len() {
            return Err(CloomError::Reference("duplicate node ids".into()));
        }
        let nl = self.meta.n_layers;
        for (i, e) in self.edges.iter().enumerate() {
            let s = idx
                .get(e.src.as_str())
                .ok_or_else(|| CloomError::Reference(format!("edges[{i}].src `{}` is not a node", e.src)))?;
            let t = idx
                .get(e.dst.as_str())
                .ok_or_else(|| CloomError::Reference(format!("edges[{i}].dst `{}` is not a node", e.dst)))?;
            let (s, t) = (&self.nodes[*s], &self.nodes[*t]);
            let reads = match t.kind {
                NodeKind::Feature => t.layer.unwrap_or(0) + 1,
                NodeKind::Logit => nl + 1,
                _ => {
                    return Err(CloomError::NonCausal(format!(
                        "edges[{i}] points into {} node `{}`",
                        t.kind.as_str(),
                        t.id
                    )))
                }
            };
            if s.kind == NodeKind::Logit || s.stage(nl) >= reads {
                return Err(CloomError::NonCausal(format!("edges[{i}] `{}` -> `{}`", s.id, t.id)));
            }
            if !e.a.is_finite() {
                return Err(CloomError::schema(format!("edges[{i}].a"), "attribution is not finite"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        check_schema(&v)?;
        let g: AttributionGraph = serde_json::from_value(v)?;
        g.validate()?;
        Ok(g)
    }
}

pub fn export_graph(graph: &AttributionGraph, path: &Path) -> Result<()> {
    std::fs::write(path, graph.to_json()?).map_err(|e| CloomError::io(path, e))
}

pub fn import_graph(path: &Path) -> Result<AttributionGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| CloomError::io(path, e))?;
    AttributionGraph::from_json(&text)
}

fn require<'v>(obj: &'v Value, key: &str, path: &str) -> Result<&'v Value> {
    match obj.get(key) {
        Some(v) if !v.is_null() => Ok(v),
        _ => Err(CloomError::schema(format!("{path}.{key}"), "missing required field")),
    }
}

fn require_uint(obj: &Value, key: &str, path: &str) -> Result<u64> {
    require(obj, key, path)?
        .as_u64()
        .ok_or_else(|| CloomError::schema(format!("{path}.{key}"), "expected a non-negative integer"))
}

fn optional_uint(obj: &Value, key: &str, path: &str) -> Result<Option<u64>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| CloomError::schema(format!("{path}.{key}"), "expected a non-negative integer or null")),
    }
}

/// Structural checks with path-addressed messages, run before typed decoding.
fn check_schema(v: &Value) -> Result<()> {
    if !v.is_object() {
        return Err(CloomError::schema("$", "expected an object"));
    }
    if !require(v, "meta", "$")?.is_object() {
        return Err(CloomError::schema("$.meta", "expected an object"));
    }
    let nodes = require(v, "nodes", "$")?
        .as_array()
        .ok_or_else(|| CloomError::schema("$.nodes", "expected an array"))?;
    let mut ids = HashSet::new();
    for (i, n) in nodes.iter().enumerate() {
        let path = format!("$.nodes[{i}]");
        if !n.is_object() {
            return Err(CloomError::schema(path, "expected an object"));
        }
        let id = require(n, "id", &path)?
            .as_str()
            .ok_or_else(|| CloomError::schema(format!("{path}.id"), "expected a string"))?;
        if !ids.insert(id.to_string()) {
            return Err(CloomError::schema(format!("{path}.id"), format!("duplicate id `{id}`")));
        }
        let kind_s = require(n, "kind", &path)?
            .as_str()
            .ok_or_else(|| CloomError::schema(format!("{path}.kind"), "expected a string"))?;
        let kind = NodeKind::parse(kind_s).ok_or_else(|| {
            CloomError::schema(
                format!("{path}.kind"),
                format!("unknown kind `{kind_s}`; expected embedding, feature, error or logit"),
            )
        })?;
        require_uint(n, "pos", &path)?;
        require(n, "activation", &path)?
            .as_f64()
            .ok_or_else(|| CloomError::schema(format!("{path}.activation"), "expected a number"))?;
        let layer = optional_uint(n, "layer", &path)?;
        let feature = optional_uint(n, "feature", &path)?;
        match kind {
            NodeKind::Feature if layer.is_none() || feature.is_none() => {
                return Err(CloomError::schema(path, "feature nodes need `layer` and `feature`"));
            }
            NodeKind::Error if layer.is_none() => {
                return Err(CloomError::schema(path, "error nodes need `layer`"));
            }
            NodeKind::Embedding | NodeKind::Logit if layer.is_some() => {
                return Err(CloomError::schema(format!("{path}.layer"), "must be absent for this kind"));
            }
            _ => {}
        }
    }
    let edges = require(v, "edges", "$")?
        .as_array()
        .ok_or_else(|| CloomError::schema("$.edges", "expected an array"))?;
    for (i, e) in edges.iter().enumerate() {
        let path = format!("$.edges[{i}]");
        for key in ["src", "dst"] {
            let id = require(e, key, &path)?
                .as_str()
                .ok_or_else(|| CloomError::schema(format!("{path}.{key}"), "expected a string"))?;
            if !ids.contains(id) {
                return Err(CloomError::Reference(format!("{path}.{key} names unknown node `{id}`")));
            }
        }
        require(e, "a", &path)?
            .as_f64()
            .ok_or_else(|| CloomError::schema(format!("{path}.a"), "expected a number"))?;
    }
    Ok(())
}
