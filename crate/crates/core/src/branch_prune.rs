//! Fixed-rate channel deletion for detection-branch layers, applied before
//! those layers are trained from scratch.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{validate, LayerKind, ModelGraph, Role};
use crate::params::{init_node, ParamStore};

/// Which branch convs lose channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BranchScope {
    /// Extras convs and the inner convs of ResBlocks.
    #[default]
    All,
    ExtrasOnly,
}

impl BranchScope {
    fn selects(self, role: Role) -> bool {
        match self {
            BranchScope::All => matches!(role, Role::Extras | Role::Resblock),
            BranchScope::ExtrasOnly => role == Role::Extras,
        }
    }
}

/// `max(1, round_half_up(channels·(1−rate)))`.
pub fn kept_channels(channels: usize, rate: f64) -> usize {
    let kept = (channels as f64 * (1.0 - rate) + 0.5 + 1e-9).floor() as usize;
    kept.clamp(1, channels.max(1))
}

/// Shrinks the selected branch convs by `rate` and propagates the new
/// widths to every consumer. Cls, loc and ResBlock output widths never change.
pub fn fixed_prune_branches(graph: &ModelGraph, rate: f64, scope: BranchScope) -> Result<ModelGraph> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("branch prune rate {rate} outside [0, 1)")));
    }
    let mut width: BTreeMap<String, usize> = BTreeMap::new();
    let mut nodes = Vec::with_capacity(graph.len());
    for node in graph.iter() {
        let ins: Vec<usize> = node.inputs.iter().map(|i| width[i]).collect();
        let mut new = node.clone();
        let w = match &mut new.kind {
            LayerKind::Input { channels } => *channels,
            LayerKind::Conv {
                in_channels,
                out_channels,
                ..
            } => {
                *in_channels = ins[0];
                if scope.selects(node.role) {
                    *out_channels = kept_channels(*out_channels, rate);
                }
                *out_channels
            }
            LayerKind::Batchnorm { channels, .. } => {
                *channels = ins[0];
                ins[0]
            }
            LayerKind::Fc {
                in_channels,
                out_channels,
            } => {
                *in_channels = ins[0];
                *out_channels
            }
            LayerKind::Concat => ins.iter().sum(),
            _ => ins[0],
        };
        width.insert(node.id.clone(), w);
        nodes.push(new);
    }
    let out = ModelGraph::from_nodes(nodes, graph.residual_groups.clone(), graph.tags.clone())?;
    let violations = validate(&out);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(out)
}

/// Redraws every branch layer's parameters (He fan-in normal) and copies
/// backbone parameters untouched.
pub fn reinitialize_branches(params: &ParamStore, graph: &ModelGraph, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamStore::new();
    for node in graph.iter() {
        if node.role.is_branch() {
            init_node(&mut out, node, &mut rng);
        } else if let Some(p) = params.node(&node.id) {
            for (name, t) in p {
                out.insert(&node.id, name, t.detached());
            }
        }
    }
    out
}
