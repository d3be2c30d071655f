// SPDX-License-Identifier: MIT OR Apache-2.0

//! Supernodes and the condensed graph view.

use std::collections::{BTreeMap, BTreeSet};

use cloom_core::attribution::{AttributionGraph, GraphEdge, GraphMeta, GraphNode, NodeKind};
use serde::{Deserialize, Serialize};

use crate::error::ServeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemberRef {
    pub layer: usize,
    pub feature: usize,
    /// `None` takes the feature at every position present in the graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<usize>,
}

impl MemberRef {
    fn matches(&self, n: &GraphNode) -> bool {
        n.kind == NodeKind::Feature
            && n.layer == Some(self.layer)
            && n.feature == Some(self.feature)
            && self.pos.is_none_or(|p| p == n.pos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supernode {
    pub id: String,
    pub label: String,
    pub members: Vec<MemberRef>,
    #[serde(default)]
    pub notes: String,
}

/// Graph node ids covered by `s`; errors when a member matches nothing.
pub fn member_ids(graph: &AttributionGraph, s: &Supernode) -> Result<BTreeSet<String>, ServeError> {
    if s.members.is_empty() {
        return Err(ServeError::validation("members", "a supernode needs at least one member"));
    }
    let mut out = BTreeSet::new();
    for (i, m) in s.members.iter().enumerate() {
        let before = out.len();
        out.extend(graph.nodes.iter().filter(|n| m.matches(n)).map(|n| n.id.clone()));
        if out.len() == before {
            return Err(ServeError::validation(
                format!("members[{i}]"),
                format!("feature {} at layer {} is not a node of the graph", m.feature, m.layer),
            ));
        }
    }
    Ok(out)
}

/// Checks `candidate` against the graph and the existing supernodes.
pub fn check_supernode(graph: &AttributionGraph, existing: &[Supernode], candidate: &Supernode) -> Result<(), ServeError> {
    let ids = member_ids(graph, candidate)?;
    for s in existing {
        if s.id == candidate.id {
            return Err(ServeError::validation("id", format!("supernode id {} already exists", s.id)));
        }
        let taken = member_ids(graph, s)?;
        if let Some(dup) = ids.intersection(&taken).next() {
            return Err(ServeError::validation(
                "members",
                format!("node {dup} already belongs to supernode {}", s.id),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupNode {
    pub id: String,
    pub kind: String,
    pub label: String,
    pub members: Vec<String>,
    /// Sum of member activations.
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CondensedNode {
    Node(GraphNode),
    Group(GroupNode),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedGraph {
    pub meta: GraphMeta,
    pub nodes: Vec<CondensedNode>,
    pub edges: Vec<GraphEdge>,
    /// Edges between members of the same supernode, omitted from `edges`.
    pub internal_edges: usize,
}

/// Collapses supernode members; edge weights between groups are summed.
pub fn grouped_view(graph: &AttributionGraph, supernodes: &[Supernode]) -> Result<CondensedGraph, ServeError> {
    let mut owner: BTreeMap<String, usize> = BTreeMap::new();
    let mut members = Vec::with_capacity(supernodes.len());
    for (i, s) in supernodes.iter().enumerate() {
        let ids = member_ids(graph, s)?;
        for id in &ids {
            if owner.insert(id.clone(), i).is_some() {
                return Err(ServeError::validation("members", format!("node {id} is in two supernodes")));
            }
        }
        members.push(ids);
    }
    let group_id = |i: usize| format!("group/{}", supernodes[i].id);
    let mapped = |id: &str| owner.get(id).map_or_else(|| id.to_string(), |&i| group_id(i));

    let mut nodes = Vec::with_capacity(graph.nodes.len());
    let mut emitted = vec![false; supernodes.len()];
    for n in &graph.nodes {
        match owner.get(&n.id) {
            None => nodes.push(CondensedNode::Node(n.clone())),
            Some(&i) if !emitted[i] => {
                emitted[i] = true;
                let activation = graph
                    .nodes
                    .iter()
                    .filter(|m| members[i].contains(&m.id))
                    .map(|m| m.activation)
                    .sum();
                nodes.push(CondensedNode::Group(GroupNode {
                    id: group_id(i),
                    kind: "supernode".into(),
                    label: supernodes[i].label.clone(),
                    members: members[i].iter().cloned().collect(),
                    activation,
                }));
            }
            Some(_) => {}
        }
    }

    let mut order: Vec<(String, String)> = Vec::new();
    let mut sums: BTreeMap<(String, String), f64> = BTreeMap::new();
    let mut internal = 0;
    for e in &graph.edges {
        let (s, d) = (mapped(&e.src), mapped(&e.dst));
        if s == d && owner.contains_key(&e.src) {
            internal += 1;
            continue;
        }
        let key = (s, d);
        match sums.get_mut(&key) {
            Some(v) => *v += e.a,
            None => {
                sums.insert(key.clone(), e.a);
                order.push(key);
            }
        }
    }
    let edges = order
        .into_iter()
        .map(|k| {
            let a = sums[&k];
            GraphEdge { src: k.0, dst: k.1, a }
        })
        .collect();
    Ok(CondensedGraph {
        meta: graph.meta.clone(),
        nodes,
        edges,
        internal_edges: internal,
    })
}
