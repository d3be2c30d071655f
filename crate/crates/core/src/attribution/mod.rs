// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution graphs over the replacement model.
//!
//! Every edge is `A = a_s · w` with `w = f_decᵀ J f_enc`, where `J` is the
//! Jacobian of the model with attention patterns, norm denominators and the
//! MLP path held fixed. With error nodes included the incoming edges of a
//! node plus its constant term sum to its pre-activation.

mod build;
mod graph;
mod linear;

pub use build::{additivity_report, build_graph, select_logits, trace_id, trace_prompt, GraphContext};
pub use graph::{
    embedding_id, error_id, export_graph, feature_id, import_graph, logit_id, AdditivityReport, AttributionGraph,
    GraphEdge, GraphMeta, GraphNode, NodeKind, PruneConfig,
};
pub use linear::{JvpDeltas, Linearization, NodeRef, Site};
