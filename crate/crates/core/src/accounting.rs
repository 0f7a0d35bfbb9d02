//! Parameter, capacity and FLOPS accounting.
//!
//! FLOPS count multiplies and adds separately, so one multiply-accumulate is
//! two operations. Per output element:
//!
//! | layer | ops |
//! |---|---|
//! | conv | 2·k²·C_in |
//! | fc | 2·C_in |
//! | batchnorm | 2 |
//! | relu, add | 1 |
//! | max/avg pool | k² |
//! | global pool | H_in·W_in |
//! | softmax | 3 |
//!
//! Elementwise layers are reported separately from convs and fcs so a
//! compute-only figure is available too.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{validate, LayerKind, ModelGraph};

pub const BYTES_PER_PARAM: f64 = 4.0;
pub const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeCost {
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub per_node: BTreeMap<String, NodeCost>,
    /// Node ids in graph order, for printing.
    pub order: Vec<String>,
    pub total_params: u64,
    /// fp32 parameter bytes in MiB.
    pub capacity_mb: f64,
    pub total_flops: u64,
    /// FLOPS of conv and fc layers only.
    pub conv_fc_flops: u64,
}

impl CostReport {
    /// Comma-separated table: `node,kind,params,flops`, then totals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,kind,params,flops\n");
        for id in &self.order {
            let c = &self.per_node[id];
            let _ = writeln!(out, "{id},{},{},{}", c.kind, c.params, c.flops);
        }
        let _ = writeln!(out, "total,,{},{}", self.total_params, self.total_flops);
        let _ = writeln!(out, "total_conv_fc,,,{}", self.conv_fc_flops);
        let _ = writeln!(out, "capacity_mb,,{:.4},", self.capacity_mb);
        out
    }
}

pub fn capacity_mb(params: u64) -> f64 {
    params as f64 * BYTES_PER_PARAM / MIB
}

/// Costs every node of a valid graph at the given input resolution.
pub fn cost(graph: &ModelGraph, input_hw: (usize, usize)) -> Result<CostReport> {
    let violations = validate(graph);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let shapes = graph.shapes(input_hw)?;
    let mut per_node = BTreeMap::new();
    let mut order = Vec::with_capacity(graph.len());
    let (mut total_params, mut total_flops, mut conv_fc_flops) = (0u64, 0u64, 0u64);
    for node in graph.iter() {
        let out = shapes[&node.id];
        let out_elems = (out.channels * out.height * out.width) as u64;
        let (params, flops) = match node.kind {
            LayerKind::Conv {
                kernel,
                in_channels,
                out_channels,
                has_bias,
                ..
            } => {
                let k2 = (kernel * kernel) as u64;
                let weights = k2 * (in_channels * out_channels) as u64;
                let bias = if has_bias { out_channels as u64 } else { 0 };
                (weights + bias, 2 * k2 * in_channels as u64 * out_elems)
            }
            LayerKind::Fc {
                in_channels,
                out_channels,
            } => (
                (in_channels * out_channels + out_channels) as u64,
                2 * (in_channels * out_channels) as u64,
            ),
            LayerKind::Batchnorm { channels, .. } => (2 * channels as u64, 2 * out_elems),
            LayerKind::Relu | LayerKind::Add => (0, out_elems),
            LayerKind::MaxPool { kernel, .. } | LayerKind::AvgPool { kernel, .. } => {
                (0, (kernel * kernel) as u64 * out_elems)
            }
            LayerKind::GlobalPool => {
                let src = shapes[&node.inputs[0]];
                (0, (src.channels * src.height * src.width) as u64)
            }
            LayerKind::Softmax => (0, 3 * out_elems),
            LayerKind::Input { .. } | LayerKind::Concat | LayerKind::Output => (0, 0),
        };
        if matches!(node.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. }) {
            conv_fc_flops += flops;
        }
        total_params += params;
        total_flops += flops;
        per_node.insert(
            node.id.clone(),
            NodeCost {
                kind: node.kind.name(),
                params,
                flops,
            },
        );
        order.push(node.id.clone());
    }
    Ok(CostReport {
        per_node,
        order,
        total_params,
        capacity_mb: capacity_mb(total_params),
        total_flops,
        conv_fc_flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{LayerNode, Role};

    #[test]
    fn empty_graph_costs_nothing() {
        let mut g = ModelGraph::new();
        g.push(LayerNode::new(
            "in",
            LayerKind::Input { channels: 3 },
            &[],
            Role::Backbone,
        ))
        .unwrap();
        g.push(LayerNode::new("out", LayerKind::Output, &["in"], Role::Backbone))
            .unwrap();
        let r = cost(&g, (8, 8)).unwrap();
        assert_eq!(r.total_params, 0);
        assert_eq!(r.total_flops, 0);
    }

    #[test]
    fn invalid_graph_is_refused() {
        let mut g = ModelGraph::new();
        g.push(LayerNode::new(
            "in",
            LayerKind::Input { channels: 3 },
            &[],
            Role::Backbone,
        ))
        .unwrap();
        g.push(LayerNode::new(
            "fc",
            LayerKind::Fc {
                in_channels: 4,
                out_channels: 2,
            },
            &["in"],
            Role::Backbone,
        ))
        .unwrap();
        assert!(matches!(cost(&g, (1, 1)), Err(Error::Validation(_))));
    }

    #[test]
    fn csv_has_totals() {
        let g = crate::graph::build_toy_backbone(4, 1).unwrap();
        let r = cost(&g, (16, 16)).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("node,kind,params,flops\n"));
        assert!(csv.contains(&format!("total,,{},{}", r.total_params, r.total_flops)));
        let sum: u64 = r.per_node.values().map(|c| c.params).sum();
        assert_eq!(sum, r.total_params);
    }
}
