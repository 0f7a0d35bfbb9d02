//! Human-readable graph documents (JSON) with `nodes`, `edges`,
//! `residual_groups` and `tags`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerNode, ModelGraph, ResidualGroup, Role};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: String,
    role: Role,
    #[serde(flatten)]
    kind: LayerKind,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    nodes: Vec<NodeDoc>,
    /// `[producer, consumer]` pairs; a consumer's inputs are its edges in listed order.
    edges: Vec<(String, String)>,
    residual_groups: Vec<ResidualGroup>,
    tags: Vec<String>,
}

pub fn serialize(graph: &ModelGraph) -> String {
    let mut nodes = Vec::with_capacity(graph.len());
    let mut edges = Vec::new();
    for node in graph.iter() {
        nodes.push(NodeDoc {
            id: node.id.clone(),
            role: node.role,
            kind: node.kind.clone(),
        });
        for input in &node.inputs {
            edges.push((input.clone(), node.id.clone()));
        }
    }
    let doc = GraphDoc {
        nodes,
        edges,
        residual_groups: graph.residual_groups.clone(),
        tags: graph.tags.iter().cloned().collect(),
    };
    serde_json::to_string_pretty(&doc).expect("graph documents always serialize")
}

pub fn deserialize(text: &str) -> Result<ModelGraph> {
    if text.trim().is_empty() {
        return Err(Error::parse(1, "document", "empty graph document"));
    }
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| "document".to_string());
        Error::parse(e.line(), field, msg)
    })?;

    let mut nodes: Vec<LayerNode> = doc
        .nodes
        .into_iter()
        .map(|n| LayerNode {
            id: n.id,
            kind: n.kind,
            inputs: Vec::new(),
            role: n.role,
        })
        .collect();
    for (from, to) in doc.edges {
        let consumer = nodes
            .iter_mut()
            .find(|n| n.id == to)
            .ok_or_else(|| Error::parse(line_of(text, &to), "edges", format!("edge targets unknown node `{to}`")))?;
        consumer.inputs.push(from);
    }
    let tags: BTreeSet<String> = doc.tags.into_iter().collect();
    ModelGraph::from_nodes(nodes, doc.residual_groups, tags).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::parse(0, "nodes", m),
        other => other,
    })
}

fn line_of(text: &str, needle: &str) -> usize {
    let quoted = format!("\"{needle}\"");
    text.lines()
        .position(|l| l.contains(&quoted))
        .map(|i| i + 1)
        .unwrap_or(0)
}
