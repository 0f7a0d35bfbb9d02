//! Computation-graph IR for convolutional networks.
//!
//! A [`ModelGraph`] is plain data: nodes keyed by id, a topological order and
//! the residual-group metadata that channel matching needs. Passes never
//! mutate a graph in place; they build and return a new one.

mod build;
mod serial;
mod validate;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use build::{
    attach_detection_branches, attach_extras, build_resnet50_v1d, build_toy_backbone, build_toy_backbone_with,
    BranchSpec, ExtrasSpec, ToyBackboneConfig,
};
pub use serial::{deserialize, serialize};
pub use validate::validate;

pub const TAG_DEPLOYABLE: &str = "deployable";
pub const TAG_SLIMMABLE: &str = "slimmable";

/// Layer taxonomy used by the branch passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Backbone,
    Extras,
    Resblock,
    /// Layers whose output width is the ResBlock's output width (expand conv, projection shortcut).
    ResblockOutput,
    Cls,
    Loc,
}

impl Role {
    pub fn is_branch(self) -> bool {
        !matches!(self, Role::Backbone)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Backbone => "backbone",
            Role::Extras => "extras",
            Role::Resblock => "resblock",
            Role::ResblockOutput => "resblock_output",
            Role::Cls => "cls",
            Role::Loc => "loc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv {
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
        has_bias: bool,
    },
    Batchnorm {
        channels: usize,
        eps: f64,
    },
    Relu,
    Add,
    GlobalPool,
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Fc {
        in_channels: usize,
        out_channels: usize,
    },
    Concat,
    Softmax,
    Output,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Batchnorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::GlobalPool => "global_pool",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Concat => "concat",
            LayerKind::Softmax => "softmax",
            LayerKind::Output => "output",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv { .. })
    }

    pub fn is_batchnorm(&self) -> bool {
        matches!(self, LayerKind::Batchnorm { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub role: Role,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str], role: Role) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            role,
        }
    }
}

/// Blocks whose outputs meet at add nodes and therefore must share one channel mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualGroup {
    pub group_index: usize,
    pub block_output_bn_ids: Vec<String>,
    pub downsample_bn_id: Option<String>,
}

impl ResidualGroup {
    /// Every BN whose output reaches the group's add nodes.
    pub fn members(&self) -> impl Iterator<Item = &str> {
        self.block_output_bn_ids
            .iter()
            .map(String::as_str)
            .chain(self.downsample_bn_id.as_deref())
    }
}

/// Keep/prune flags over one layer's output channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask {
    pub layer_id: String,
    pub keep: Vec<bool>,
}

impl ChannelMask {
    pub fn all_kept(layer_id: impl Into<String>, channels: usize) -> Self {
        Self {
            layer_id: layer_id.into(),
            keep: vec![true; channels],
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn pruned(&self) -> usize {
        self.len() - self.kept()
    }

    /// Original indices of the kept channels.
    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    /// `0`/`1` string, one character per channel.
    pub fn to_bits(&self) -> String {
        self.keep.iter().map(|&k| if k { '1' } else { '0' }).collect()
    }

    pub fn from_bits(layer_id: impl Into<String>, bits: &str) -> Option<Self> {
        let keep = bits
            .chars()
            .map(|c| match c {
                '1' => Some(true),
                '0' => Some(false),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self {
            layer_id: layer_id.into(),
            keep,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelGraph {
    nodes: BTreeMap<String, LayerNode>,
    order: Vec<String>,
    pub residual_groups: Vec<ResidualGroup>,
    pub tags: BTreeSet<String>,
}

/// Output geometry of one node: channels and spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ModelGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from unordered nodes, deriving a topological order.
    pub fn from_nodes(
        nodes: Vec<LayerNode>,
        residual_groups: Vec<ResidualGroup>,
        tags: BTreeSet<String>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut first_seen = Vec::with_capacity(nodes.len());
        for node in nodes {
            if map.contains_key(&node.id) {
                return Err(Error::invalid(format!("duplicate node id `{}`", node.id)));
            }
            first_seen.push(node.id.clone());
            map.insert(node.id.clone(), node);
        }
        let order = topo_order(&map, &first_seen)?;
        Ok(Self {
            nodes: map,
            order,
            residual_groups,
            tags,
        })
    }

    /// Appends a node; all of its inputs must already be present.
    pub fn push(&mut self, node: LayerNode) -> Result<()> {
        if self.nodes.contains_key(&node.id) {
            return Err(Error::invalid(format!("duplicate node id `{}`", node.id)));
        }
        for input in &node.inputs {
            if !self.nodes.contains_key(input) {
                return Err(Error::invalid(format!(
                    "node `{}` references unknown input `{input}`",
                    node.id
                )));
            }
        }
        self.order.push(node.id.clone());
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut LayerNode> {
        self.nodes.get_mut(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn order(&self) -> &[String] {
        &self.order
    }

    /// Nodes in topological order.
    pub fn iter(&self) -> impl Iterator<Item = &LayerNode> {
        self.order.iter().map(move |id| &self.nodes[id])
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }

    pub fn consumers(&self, id: &str) -> Vec<&LayerNode> {
        self.iter().filter(|n| n.inputs.iter().any(|i| i == id)).collect()
    }

    pub fn consumer_map(&self) -> HashMap<&str, Vec<&str>> {
        let mut map: HashMap<&str, Vec<&str>> = HashMap::new();
        for node in self.iter() {
            for input in &node.inputs {
                map.entry(input.as_str()).or_default().push(node.id.as_str());
            }
        }
        map
    }

    pub fn input_nodes(&self) -> Vec<&LayerNode> {
        self.iter()
            .filter(|n| matches!(n.kind, LayerKind::Input { .. }))
            .collect()
    }

    /// All batchnorm nodes, in topological order.
    pub fn batchnorm_ids(&self) -> Vec<&str> {
        self.iter()
            .filter(|n| n.kind.is_batchnorm())
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Output channel count of every node, derived along the topological order.
    ///
    /// Fails when a node's channel count cannot be derived (missing input,
    /// add/concat with no inputs).
    pub fn channels(&self) -> Result<BTreeMap<String, usize>> {
        let mut out: BTreeMap<String, usize> = BTreeMap::new();
        for node in self.iter() {
            let input_ch = |i: usize| -> Result<usize> {
                let src = node
                    .inputs
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("node `{}` is missing input #{i}", node.id)))?;
                out.get(src)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("node `{}`: unknown input `{src}`", node.id)))
            };
            let c = match &node.kind {
                LayerKind::Input { channels } => *channels,
                LayerKind::Conv { out_channels, .. } | LayerKind::Fc { out_channels, .. } => *out_channels,
                LayerKind::Batchnorm { channels, .. } => *channels,
                LayerKind::Concat => {
                    let mut total = 0;
                    for i in 0..node.inputs.len() {
                        total += input_ch(i)?;
                    }
                    total
                }
                _ => input_ch(0)?,
            };
            out.insert(node.id.clone(), c);
        }
        Ok(out)
    }

    /// Channels and spatial size of every node for the given input size.
    pub fn shapes(&self, input_hw: (usize, usize)) -> Result<BTreeMap<String, NodeShape>> {
        let channels = self.channels()?;
        let mut out: BTreeMap<String, NodeShape> = BTreeMap::new();
        for node in self.iter() {
            let prev = node.inputs.first().and_then(|i| out.get(i)).copied();
            let need_prev = || prev.ok_or_else(|| Error::invalid(format!("node `{}` has no input", node.id)));
            let (height, width) = match &node.kind {
                LayerKind::Input { .. } => input_hw,
                LayerKind::Conv { kernel, stride, .. } => {
                    let p = need_prev()?;
                    let pad = kernel / 2;
                    (
                        window_out(p.height, *kernel, *stride, pad, &node.id)?,
                        window_out(p.width, *kernel, *stride, pad, &node.id)?,
                    )
                }
                LayerKind::MaxPool { kernel, stride, pad } | LayerKind::AvgPool { kernel, stride, pad } => {
                    let p = need_prev()?;
                    (
                        window_out(p.height, *kernel, *stride, *pad, &node.id)?,
                        window_out(p.width, *kernel, *stride, *pad, &node.id)?,
                    )
                }
                LayerKind::GlobalPool | LayerKind::Fc { .. } => (1, 1),
                _ => {
                    let p = need_prev()?;
                    (p.height, p.width)
                }
            };
            out.insert(
                node.id.clone(),
                NodeShape {
                    channels: channels[&node.id],
                    height,
                    width,
                },
            );
        }
        Ok(out)
    }

    /// Keeps only `roots` and their ancestors.
    pub fn retain_ancestors(&self, roots: &[&str]) -> Result<ModelGraph> {
        let mut keep: BTreeSet<String> = BTreeSet::new();
        let mut stack: Vec<String> = Vec::new();
        for r in roots {
            if !self.contains(r) {
                return Err(Error::invalid(format!("unknown node `{r}`")));
            }
            stack.push(r.to_string());
        }
        while let Some(id) = stack.pop() {
            if keep.insert(id.clone()) {
                stack.extend(self.nodes[&id].inputs.iter().cloned());
            }
        }
        let mut g = ModelGraph {
            tags: self.tags.clone(),
            ..ModelGraph::default()
        };
        for node in self.iter().filter(|n| keep.contains(&n.id)) {
            g.push(node.clone())?;
        }
        g.residual_groups = self
            .residual_groups
            .iter()
            .filter(|grp| grp.members().all(|m| keep.contains(m)))
            .cloned()
            .collect();
        Ok(g)
    }
}

fn window_out(size: usize, kernel: usize, stride: usize, pad: usize, id: &str) -> Result<usize> {
    if stride == 0 || size + 2 * pad < kernel {
        return Err(Error::invalid(format!(
            "node `{id}`: window {kernel}/{stride} does not fit input size {size}"
        )));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

fn topo_order(nodes: &BTreeMap<String, LayerNode>, first_seen: &[String]) -> Result<Vec<String>> {
    let rank: HashMap<&str, usize> = first_seen.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut indegree: HashMap<&str, usize> = HashMap::new();
    let mut consumers: HashMap<&str, Vec<&str>> = HashMap::new();
    for node in nodes.values() {
        indegree.entry(node.id.as_str()).or_insert(0);
        for input in &node.inputs {
            if !nodes.contains_key(input) {
                return Err(Error::invalid(format!(
                    "node `{}` references unknown input `{input}`",
                    node.id
                )));
            }
            *indegree.entry(node.id.as_str()).or_insert(0) += 1;
            consumers.entry(input.as_str()).or_default().push(node.id.as_str());
        }
    }
    // Among ready nodes, the one declared first goes first.
    let mut ready: BTreeSet<(usize, &str)> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| (rank[id], *id))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(first) = ready.pop_first() {
        let id = first.1;
        order.push(id.to_string());
        for c in consumers.get(id).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indegree.get_mut(c).expect("indegree");
            *d -= 1;
            if *d == 0 {
                ready.insert((rank[c], *c));
            }
        }
    }
    if order.len() != nodes.len() {
        return Err(Error::invalid("graph contains a cycle"));
    }
    Ok(order)
}
