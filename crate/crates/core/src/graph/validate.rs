use std::collections::{BTreeMap, HashMap};

use super::{LayerKind, ModelGraph, Role, TAG_DEPLOYABLE, TAG_SLIMMABLE};
use crate::error::Violation;

/// Checks every graph invariant; an empty list means the graph is valid.
pub fn validate(graph: &ModelGraph) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut position: HashMap<&str, usize> = HashMap::new();
    for (i, id) in graph.order().iter().enumerate() {
        position.insert(id.as_str(), i);
    }
    for node in graph.iter() {
        for input in &node.inputs {
            match position.get(input.as_str()) {
                None => out.push(Violation::new(&node.id, format!("unknown input `{input}`"))),
                Some(&p) if p >= position[node.id.as_str()] => out.push(Violation::new(
                    &node.id,
                    format!("input `{input}` does not precede the node in topological order"),
                )),
                _ => {}
            }
        }
    }
    if !out.is_empty() {
        return out;
    }

    let channels = match graph.channels() {
        Ok(c) => c,
        Err(e) => {
            out.push(Violation::new("<graph>", format!("channel inference failed: {e}")));
            return out;
        }
    };
    let consumers = graph.consumer_map();
    let deployable = graph.has_tag(TAG_DEPLOYABLE);
    let slimmable = graph.has_tag(TAG_SLIMMABLE);
    let producer = |i: &str| channels.get(i).copied().unwrap_or(0);

    for node in graph.iter() {
        let arity_ok = match node.kind {
            LayerKind::Input { .. } => node.inputs.is_empty(),
            LayerKind::Add => node.inputs.len() == 2,
            LayerKind::Concat => !node.inputs.is_empty(),
            _ => node.inputs.len() == 1,
        };
        if !arity_ok {
            out.push(Violation::new(
                &node.id,
                format!("{} node has {} inputs", node.kind.name(), node.inputs.len()),
            ));
            continue;
        }
        match &node.kind {
            LayerKind::Input { channels } => {
                if *channels == 0 {
                    out.push(Violation::new(&node.id, "input has zero channels"));
                }
            }
            LayerKind::Conv {
                kernel,
                stride,
                in_channels,
                out_channels,
                has_bias,
            } => {
                if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                    out.push(Violation::new(&node.id, "conv has a zero kernel, stride or width"));
                }
                if deployable && !matches!(kernel, 1 | 3) {
                    out.push(Violation::new(
                        &node.id,
                        format!("kernel size {kernel} not allowed in a deployable graph (1 or 3 only)"),
                    ));
                }
                let src = producer(&node.inputs[0]);
                if src != *in_channels {
                    out.push(Violation::new(
                        &node.id,
                        format!("in_channels {in_channels} but producer `{}` has {src}", node.inputs[0]),
                    ));
                }
                let next: Vec<&str> = consumers.get(node.id.as_str()).cloned().unwrap_or_default();
                let feeds_bn = next
                    .iter()
                    .any(|c| graph.node(c).is_some_and(|n| n.kind.is_batchnorm()));
                if feeds_bn && *has_bias {
                    out.push(Violation::new(
                        &node.id,
                        "conv followed by batchnorm must not carry a bias",
                    ));
                }
                if slimmable && !matches!(node.role, Role::Cls | Role::Loc) {
                    let single_bn = next.len() == 1 && graph.node(next[0]).is_some_and(|n| n.kind.is_batchnorm());
                    if !single_bn {
                        out.push(Violation::new(
                            &node.id,
                            "conv in a slimmable graph must feed exactly one batchnorm",
                        ));
                    }
                }
            }
            LayerKind::Batchnorm { channels: c, eps } => {
                let src = producer(&node.inputs[0]);
                if src != *c {
                    out.push(Violation::new(
                        &node.id,
                        format!("batchnorm has {c} channels but producer has {src}"),
                    ));
                }
                if !(*eps > 0.0) {
                    out.push(Violation::new(&node.id, "batchnorm eps must be positive"));
                }
            }
            LayerKind::Add => {
                let a = producer(&node.inputs[0]);
                let b = producer(&node.inputs[1]);
                if a != b {
                    out.push(Violation::new(
                        &node.id,
                        format!("add inputs have mismatched channels {a} and {b}"),
                    ));
                }
            }
            LayerKind::Fc {
                in_channels,
                out_channels,
            } => {
                let src = producer(&node.inputs[0]);
                if src != *in_channels {
                    out.push(Violation::new(
                        &node.id,
                        format!("fc in_channels {in_channels} but producer has {src}"),
                    ));
                }
                if *out_channels == 0 {
                    out.push(Violation::new(&node.id, "fc has zero outputs"));
                }
            }
            LayerKind::MaxPool { kernel, stride, .. } | LayerKind::AvgPool { kernel, stride, .. } => {
                if *kernel == 0 || *stride == 0 {
                    out.push(Violation::new(&node.id, "pool has a zero kernel or stride"));
                }
            }
            _ => {}
        }
    }

    for group in &graph.residual_groups {
        let mut counts: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for m in group.members() {
            match graph.node(m) {
                Some(n) if n.kind.is_batchnorm() => {
                    counts.entry(channels[m]).or_default().push(m);
                }
                Some(_) => out.push(Violation::new(
                    m,
                    format!("residual group {} member is not a batchnorm", group.group_index),
                )),
                None => out.push(Violation::new(
                    m,
                    format!("residual group {} references a missing node", group.group_index),
                )),
            }
        }
        if counts.len() > 1 {
            let first = counts
                .values()
                .next()
                .and_then(|v| v.first())
                .copied()
                .unwrap_or("<group>");
            out.push(Violation::new(
                first,
                format!(
                    "residual group {} members disagree on channel count: {:?}",
                    group.group_index,
                    counts.keys().collect::<Vec<_>>()
                ),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_resnet50_v1d, LayerNode, ModelGraph};

    fn conv(id: &str, input: &str, k: usize, cin: usize, cout: usize) -> LayerNode {
        LayerNode::new(
            id,
            LayerKind::Conv {
                kernel: k,
                stride: 1,
                in_channels: cin,
                out_channels: cout,
                has_bias: true,
            },
            &[input],
            Role::Backbone,
        )
    }

    fn base() -> ModelGraph {
        let mut g = ModelGraph::new();
        g.push(LayerNode::new(
            "in",
            LayerKind::Input { channels: 3 },
            &[],
            Role::Backbone,
        ))
        .unwrap();
        g
    }

    #[test]
    fn resnet_is_valid() {
        assert!(validate(&build_resnet50_v1d()).is_empty());
    }

    #[test]
    fn mismatched_add_is_reported() {
        let mut g = base();
        g.push(conv("a", "in", 1, 3, 4)).unwrap();
        g.push(conv("b", "in", 1, 3, 5)).unwrap();
        g.push(LayerNode::new("sum", LayerKind::Add, &["a", "b"], Role::Backbone))
            .unwrap();
        let v = validate(&g);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].node, "sum");
    }

    #[test]
    fn five_by_five_conv_not_deployable() {
        let mut g = base();
        g.tags.insert(TAG_DEPLOYABLE.into());
        g.push(conv("c", "in", 5, 3, 4)).unwrap();
        let v = validate(&g);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("kernel size 5"));
    }

    #[test]
    fn slimmable_conv_needs_batchnorm() {
        let mut g = base();
        g.tags.insert(TAG_SLIMMABLE.into());
        g.push(conv("c", "in", 3, 3, 4)).unwrap();
        g.push(LayerNode::new("r", LayerKind::Relu, &["c"], Role::Backbone))
            .unwrap();
        let v = validate(&g);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].node, "c");
    }

    #[test]
    fn channel_disagreement_is_reported() {
        let mut g = base();
        g.push(conv("c", "in", 3, 4, 4)).unwrap();
        let v = validate(&g);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("in_channels"));
    }
}
