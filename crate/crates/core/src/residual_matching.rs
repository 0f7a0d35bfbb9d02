//! Shared masks across residual groups and the rewrite that physically
//! removes pruned channels from a graph and its parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{validate, ChannelMask, LayerKind, ModelGraph, ResidualGroup};
use crate::params::{ParamStore, BETA, BIAS, GAMMA, RUNNING_MEAN, RUNNING_VAR, WEIGHT};
use crate::slimming::PruningPlan;

/// Elementwise OR of the group's member masks: a channel survives if any
/// block keeps it.
pub fn unify_group_masks(plan: &PruningPlan, group: &ResidualGroup) -> Result<ChannelMask> {
    let mut members = group.members();
    let first = members
        .next()
        .ok_or_else(|| Error::invalid(format!("residual group {} has no members", group.group_index)))?;
    let mut keep = member_mask(plan, first)?.keep.clone();
    for id in members {
        let m = member_mask(plan, id)?;
        if m.len() != keep.len() {
            return Err(Error::invalid(format!(
                "mask of `{id}` has {} channels, group {} expects {}",
                m.len(),
                group.group_index,
                keep.len()
            )));
        }
        for (k, &b) in keep.iter_mut().zip(&m.keep) {
            *k |= b;
        }
    }
    Ok(ChannelMask {
        layer_id: format!("group{}", group.group_index),
        keep,
    })
}

fn member_mask<'a>(plan: &'a PruningPlan, id: &str) -> Result<&'a ChannelMask> {
    plan.masks
        .get(id)
        .ok_or_else(|| Error::invalid(format!("plan has no mask for group member `{id}`")))
}

/// Replaces every group member's mask with the group's unified mask.
pub fn unify_all(plan: &PruningPlan, groups: &[ResidualGroup]) -> Result<PruningPlan> {
    let mut out = plan.clone();
    for group in groups {
        let unified = unify_group_masks(plan, group)?;
        for id in group.members() {
            out.masks.insert(
                id.to_string(),
                ChannelMask {
                    layer_id: id.to_string(),
                    keep: unified.keep.clone(),
                },
            );
        }
    }
    out.refresh_rate();
    Ok(out)
}

/// Keeps every channel of every group member instead of unifying.
pub fn disable_matching(plan: &PruningPlan, groups: &[ResidualGroup]) -> PruningPlan {
    let mut out = plan.clone();
    for id in groups.iter().flat_map(ResidualGroup::members) {
        if let Some(m) = out.masks.get_mut(id) {
            m.keep.iter_mut().for_each(|k| *k = true);
        }
    }
    out.refresh_rate();
    out
}

/// Result of [`apply_plan`]. `remap` lists, per node, the original indices
/// of the output channels that survived.
#[derive(Debug, Clone)]
pub struct PrunedModel {
    pub graph: ModelGraph,
    pub params: ParamStore,
    pub remap: BTreeMap<String, Vec<usize>>,
}

impl PrunedModel {
    /// One line per node whose width changed: `<id> <orig>,<orig>,...`.
    pub fn remap_text(&self, original: &ModelGraph) -> Result<String> {
        let before = original.channels()?;
        let mut out = String::new();
        for (id, kept) in &self.remap {
            if before.get(id) == Some(&kept.len()) {
                continue;
            }
            let list: Vec<String> = kept.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{id} {}", list.join(","));
        }
        Ok(out)
    }
}

/// Removes every channel whose mask bit is 0 from the conv+BN pair that
/// produces it and the matching input slices from every consumer.
///
/// A pruned channel's β contribution is dropped, so the rewrite preserves
/// the network function exactly only where pruned channels have β = 0.
pub fn apply_plan(graph: &ModelGraph, params: &ParamStore, plan: &PruningPlan) -> Result<PrunedModel> {
    let channels = graph.channels()?;
    for (id, m) in &plan.masks {
        let node = graph
            .node(id)
            .ok_or_else(|| Error::invalid(format!("plan names unknown layer `{id}`")))?;
        if !node.kind.is_batchnorm() {
            return Err(Error::invalid(format!("plan mask on non-batchnorm layer `{id}`")));
        }
        if m.len() != channels[id] {
            return Err(Error::invalid(format!(
                "mask for `{id}` has {} entries, layer has {} channels",
                m.len(),
                channels[id]
            )));
        }
        if m.kept() == 0 {
            return Err(Error::invalid(format!("mask would remove every channel of `{id}`")));
        }
    }

    // Convs whose output width is dictated by the BN they feed.
    let mut owned_by: BTreeMap<&str, &str> = BTreeMap::new();
    for node in graph.iter() {
        if node.kind.is_batchnorm() && plan.masks.contains_key(&node.id) {
            let src = &node.inputs[0];
            let src_node = graph.node(src).expect("validated input");
            let sole = graph.consumers(src).len() == 1;
            if src_node.kind.is_conv() && sole {
                owned_by.insert(src.as_str(), node.id.as_str());
            }
        }
    }

    let mut kept: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut nodes = Vec::with_capacity(graph.len());
    let mut out_params = ParamStore::new();
    for node in graph.iter() {
        let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|i| &kept[i]).collect();
        let mut new = node.clone();
        let survivors: Vec<usize> = match &mut new.kind {
            LayerKind::Input { channels } => (0..*channels).collect(),
            LayerKind::Conv {
                in_channels,
                out_channels,
                ..
            } => {
                let out: Vec<usize> = match owned_by.get(node.id.as_str()) {
                    Some(bn) => plan.masks[*bn].kept_indices(),
                    None => (0..*out_channels).collect(),
                };
                let in_keep = ins[0].clone();
                if let Some(w) = params.get(&node.id, WEIGHT) {
                    out_params.insert(&node.id, WEIGHT, slice_conv(w, &out, &in_keep));
                }
                if let Some(b) = params.get(&node.id, BIAS) {
                    out_params.insert(&node.id, BIAS, slice_rows(b, &out));
                }
                *in_channels = in_keep.len();
                *out_channels = out.len();
                out
            }
            LayerKind::Batchnorm { channels, .. } => {
                let input = ins[0].clone();
                if let Some(m) = plan.masks.get(&node.id) {
                    let wanted = m.kept_indices();
                    if wanted != input {
                        return Err(Error::invalid(format!(
                            "mask of `{}` cannot be applied: its producer `{}` is not a conv it owns",
                            node.id, node.inputs[0]
                        )));
                    }
                }
                for name in [GAMMA, BETA, RUNNING_MEAN, RUNNING_VAR] {
                    if let Some(t) = params.get(&node.id, name) {
                        out_params.insert(&node.id, name, slice_rows(t, &input));
                    }
                }
                *channels = input.len();
                input
            }
            LayerKind::Add => {
                if ins.windows(2).any(|w| w[0] != w[1]) {
                    return Err(Error::invalid(format!(
                        "add `{}` would receive differently pruned inputs; unify its residual group first",
                        node.id
                    )));
                }
                ins[0].clone()
            }
            LayerKind::Concat => {
                let mut out = Vec::new();
                let mut offset = 0;
                for (src, k) in node.inputs.iter().zip(&ins) {
                    out.extend(k.iter().map(|i| offset + i));
                    offset += channels[src];
                }
                out
            }
            LayerKind::Fc {
                in_channels,
                out_channels,
            } => {
                let in_keep = ins[0].clone();
                let out: Vec<usize> = (0..*out_channels).collect();
                if let Some(w) = params.get(&node.id, WEIGHT) {
                    out_params.insert(&node.id, WEIGHT, slice_conv(w, &out, &in_keep));
                }
                if let Some(b) = params.get(&node.id, BIAS) {
                    out_params.insert(&node.id, BIAS, b.detached());
                }
                *in_channels = in_keep.len();
                out
            }
            LayerKind::Relu
            | LayerKind::GlobalPool
            | LayerKind::MaxPool { .. }
            | LayerKind::AvgPool { .. }
            | LayerKind::Softmax
            | LayerKind::Output => ins[0].clone(),
        };
        kept.insert(node.id.clone(), survivors);
        nodes.push(new);
    }

    let pruned = ModelGraph::from_nodes(nodes, graph.residual_groups.clone(), graph.tags.clone())?;
    let violations = validate(&pruned);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(PrunedModel {
        graph: pruned,
        params: out_params,
        remap: kept,
    })
}

/// Selects rows of a `[rows, ...]` tensor.
fn slice_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let shape = t.shape();
    let inner: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * inner);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * inner..(r + 1) * inner]);
    }
    let mut s = shape.to_vec();
    s[0] = rows.len();
    Tensor::new(s, data).expect("row slice")
}

/// Selects output rows and input columns of a `[out, in, ...]` weight.
fn slice_conv(t: &Tensor, out: &[usize], inp: &[usize]) -> Tensor {
    let shape = t.shape();
    let cin = shape[1];
    let k: usize = shape[2..].iter().product();
    let mut data = Vec::with_capacity(out.len() * inp.len() * k);
    for &o in out {
        for &i in inp {
            let base = (o * cin + i) * k;
            data.extend_from_slice(&t.data()[base..base + k]);
        }
    }
    let mut s = shape.to_vec();
    s[0] = out.len();
    s[1] = inp.len();
    Tensor::new(s, data).expect("weight slice")
}
