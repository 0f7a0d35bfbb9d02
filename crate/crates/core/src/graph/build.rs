//! Topology templates: Resnet50-v1d, a desk-scale look-alike, and SSD-style
//! extras and detection branches.

use super::{LayerKind, LayerNode, ModelGraph, ResidualGroup, Role, TAG_DEPLOYABLE, TAG_SLIMMABLE};
use crate::error::{Error, Result};

struct Net {
    g: ModelGraph,
}

impl Net {
    fn node(&mut self, id: String, kind: LayerKind, inputs: &[&str], role: Role) -> Result<String> {
        self.g.push(LayerNode::new(id.clone(), kind, inputs, role))?;
        Ok(id)
    }

    /// conv (bias-free) followed by batchnorm; returns the BN id.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        prefix: &str,
        suffix: &str,
        input: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        role: Role,
    ) -> Result<String> {
        let conv = self.node(
            format!("{prefix}.conv{suffix}"),
            LayerKind::Conv {
                kernel,
                stride,
                in_channels,
                out_channels,
                has_bias: false,
            },
            &[input],
            role,
        )?;
        self.node(
            format!("{prefix}.bn{suffix}"),
            LayerKind::Batchnorm {
                channels: out_channels,
                eps: 1e-5,
            },
            &[&conv],
            role,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn_relu(
        &mut self,
        prefix: &str,
        suffix: &str,
        input: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        role: Role,
    ) -> Result<String> {
        let bn = self.conv_bn(prefix, suffix, input, in_channels, out_channels, kernel, stride, role)?;
        self.node(format!("{prefix}.relu{suffix}"), LayerKind::Relu, &[&bn], role)
    }
}

struct GroupLayout {
    blocks: usize,
    mid: usize,
    out: usize,
    stride: usize,
}

/// Deep stem: three 3×3 convs, then a 3×3/2 max pool.
fn deep_stem(net: &mut Net, input: &str, in_ch: usize, widths: [usize; 3]) -> Result<String> {
    let r1 = net.conv_bn_relu("stem", "1", input, in_ch, widths[0], 3, 2, Role::Backbone)?;
    let r2 = net.conv_bn_relu("stem", "2", &r1, widths[0], widths[1], 3, 1, Role::Backbone)?;
    let r3 = net.conv_bn_relu("stem", "3", &r2, widths[1], widths[2], 3, 1, Role::Backbone)?;
    net.node(
        "stem.pool".into(),
        LayerKind::MaxPool {
            kernel: 3,
            stride: 2,
            pad: 1,
        },
        &[&r3],
        Role::Backbone,
    )
}

/// Post-activation bottleneck groups with v1d shortcuts (avg pool before the
/// 1×1 projection when the block downsamples). Returns the last node id and
/// its channel count.
fn bottleneck_groups(net: &mut Net, input: &str, in_ch: usize, layout: &[GroupLayout]) -> Result<(String, usize)> {
    let mut x = input.to_string();
    let mut ch = in_ch;
    for (gi, group) in layout.iter().enumerate() {
        let group_input = x.clone();
        let mut outputs = Vec::with_capacity(group.blocks);
        let mut downsample = None;
        for b in 0..group.blocks {
            let p = format!("layer{}.{b}", gi + 1);
            let stride = if b == 0 { group.stride } else { 1 };
            let r1 = net.conv_bn_relu(&p, "1", &x, ch, group.mid, 1, 1, Role::Backbone)?;
            let r2 = net.conv_bn_relu(&p, "2", &r1, group.mid, group.mid, 3, stride, Role::Backbone)?;
            let bn3 = net.conv_bn(&p, "3", &r2, group.mid, group.out, 1, 1, Role::Backbone)?;
            let shortcut = if stride != 1 || ch != group.out {
                let mut src = x.clone();
                if stride != 1 {
                    src = net.node(
                        format!("{p}.down.pool"),
                        LayerKind::AvgPool {
                            kernel: stride,
                            stride,
                            pad: 0,
                        },
                        &[&x],
                        Role::Backbone,
                    )?;
                }
                let bn = net.conv_bn(&format!("{p}.down"), "", &src, ch, group.out, 1, 1, Role::Backbone)?;
                downsample = Some(bn.clone());
                bn
            } else {
                x.clone()
            };
            let add = net.node(format!("{p}.add"), LayerKind::Add, &[&bn3, &shortcut], Role::Backbone)?;
            x = net.node(format!("{p}.relu"), LayerKind::Relu, &[&add], Role::Backbone)?;
            ch = group.out;
            outputs.push(bn3);
        }
        if downsample.is_none() {
            // Identity shortcut into the first block: the group shares
            // channels with whatever produced its input.
            if gi > 0 {
                let prev = net.g.residual_groups.last_mut().expect("previous group");
                prev.block_output_bn_ids.extend(outputs);
                continue;
            }
            if let Some(bn) = producing_bn(&net.g, &group_input) {
                outputs.insert(0, bn);
            }
        }
        let group_index = net.g.residual_groups.len();
        net.g.residual_groups.push(ResidualGroup {
            group_index,
            block_output_bn_ids: outputs,
            downsample_bn_id: downsample,
        });
    }
    Ok((x, ch))
}

/// Walks back through channel-preserving nodes to the batch norm that
/// sets `id`'s channels.
fn producing_bn(g: &ModelGraph, id: &str) -> Option<String> {
    let mut cur = g.node(id)?;
    loop {
        match cur.kind {
            LayerKind::Batchnorm { .. } => return Some(cur.id.clone()),
            LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. } => {
                cur = g.node(&cur.inputs[0])?;
            }
            _ => return None,
        }
    }
}

fn classifier(net: &mut Net, input: &str, ch: usize, classes: usize) -> Result<()> {
    let pool = net.node("pool".into(), LayerKind::GlobalPool, &[input], Role::Backbone)?;
    let fc = net.node(
        "fc".into(),
        LayerKind::Fc {
            in_channels: ch,
            out_channels: classes,
        },
        &[&pool],
        Role::Backbone,
    )?;
    net.node("output".into(), LayerKind::Output, &[&fc], Role::Backbone)?;
    Ok(())
}

fn tagged_net() -> Net {
    let mut g = ModelGraph::new();
    g.tags.insert(TAG_DEPLOYABLE.to_string());
    g.tags.insert(TAG_SLIMMABLE.to_string());
    Net { g }
}

/// Full Resnet50-v1d: deep 3×3 stem (32, 32, 64), bottleneck groups of
/// 3, 4, 6 and 3 blocks, global pool and a 1000-way fc.
pub fn build_resnet50_v1d() -> ModelGraph {
    let mut net = tagged_net();
    let layout = [
        GroupLayout {
            blocks: 3,
            mid: 64,
            out: 256,
            stride: 1,
        },
        GroupLayout {
            blocks: 4,
            mid: 128,
            out: 512,
            stride: 2,
        },
        GroupLayout {
            blocks: 6,
            mid: 256,
            out: 1024,
            stride: 2,
        },
        GroupLayout {
            blocks: 3,
            mid: 512,
            out: 2048,
            stride: 2,
        },
    ];
    let build = |net: &mut Net| -> Result<()> {
        let input = net.node("input".into(), LayerKind::Input { channels: 3 }, &[], Role::Backbone)?;
        let stem = deep_stem(net, &input, 3, [32, 32, 64])?;
        let (x, ch) = bottleneck_groups(net, &stem, 64, &layout)?;
        classifier(net, &x, ch, 1000)
    };
    build(&mut net).expect("resnet50-v1d template is well formed");
    net.g
}

/// Shape parameters of the desk-scale backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyBackboneConfig {
    pub width: usize,
    pub groups: usize,
    pub blocks_per_group: usize,
    pub expansion: usize,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl ToyBackboneConfig {
    pub fn new(width: usize, groups: usize) -> Self {
        Self {
            width,
            groups,
            blocks_per_group: 2,
            expansion: 4,
            num_classes: 3,
            input_channels: 3,
        }
    }
}

/// Miniature Resnet50-v1d look-alike: same stem, block and shortcut grammar.
pub fn build_toy_backbone(width: usize, groups: usize) -> Result<ModelGraph> {
    build_toy_backbone_with(ToyBackboneConfig::new(width, groups))
}

pub fn build_toy_backbone_with(cfg: ToyBackboneConfig) -> Result<ModelGraph> {
    if cfg.width < 4 {
        return Err(Error::invalid(format!(
            "toy backbone width must be >= 4, got {}",
            cfg.width
        )));
    }
    if cfg.groups == 0 || cfg.blocks_per_group == 0 || cfg.expansion == 0 {
        return Err(Error::invalid(
            "toy backbone needs at least one group, block and expansion",
        ));
    }
    if cfg.num_classes == 0 || cfg.input_channels == 0 {
        return Err(Error::invalid("toy backbone needs classes and input channels"));
    }
    let mut net = tagged_net();
    let w = cfg.width;
    let input = net.node(
        "input".into(),
        LayerKind::Input {
            channels: cfg.input_channels,
        },
        &[],
        Role::Backbone,
    )?;
    let stem = deep_stem(&mut net, &input, cfg.input_channels, [w / 2, w / 2, w])?;
    let layout: Vec<GroupLayout> = (0..cfg.groups)
        .map(|g| GroupLayout {
            blocks: cfg.blocks_per_group,
            mid: w << g,
            out: (w << g) * cfg.expansion,
            stride: if g == 0 { 1 } else { 2 },
        })
        .collect();
    let (x, ch) = bottleneck_groups(&mut net, &stem, w, &layout)?;
    classifier(&mut net, &x, ch, cfg.num_classes)?;
    Ok(net.g)
}

/// SSD extras: each stage is a 1×1 reduce followed by a strided 3×3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtrasSpec {
    pub from: String,
    /// (reduce width, output width) per stage.
    pub stages: Vec<(usize, usize)>,
}

/// Appends extras layers; returns the new graph and each stage's output id.
pub fn attach_extras(graph: &ModelGraph, spec: &ExtrasSpec) -> Result<(ModelGraph, Vec<String>)> {
    let channels = graph.channels()?;
    let mut ch = *channels
        .get(&spec.from)
        .ok_or_else(|| Error::invalid(format!("unknown feature node `{}`", spec.from)))?;
    let mut net = Net { g: graph.clone() };
    let mut start = 0;
    while net.g.contains(&format!("extras.{start}.conv1")) {
        start += 1;
    }
    let mut x = spec.from.clone();
    let mut outputs = Vec::new();
    for (i, &(mid, out)) in spec.stages.iter().enumerate() {
        let p = format!("extras.{}", start + i);
        let r1 = net.conv_bn_relu(&p, "1", &x, ch, mid, 1, 1, Role::Extras)?;
        x = net.conv_bn_relu(&p, "2", &r1, mid, out, 3, 2, Role::Extras)?;
        ch = out;
        outputs.push(x.clone());
    }
    Ok((net.g, outputs))
}

/// One detection branch: optional simple ResBlock, then cls and loc convs
/// (1×1 by default).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    pub feature_node_id: String,
    pub num_anchors: usize,
    /// Including background.
    pub num_classes: usize,
    /// (reduce width, output width) of the ResBlock, or `None` for a bare head.
    pub resblock: Option<(usize, usize)>,
    pub head_kernel: usize,
}

impl BranchSpec {
    pub fn new(feature: impl Into<String>, num_anchors: usize, num_classes: usize) -> Self {
        Self {
            feature_node_id: feature.into(),
            num_anchors,
            num_classes,
            resblock: None,
            head_kernel: 1,
        }
    }

    pub fn with_head_kernel(mut self, kernel: usize) -> Self {
        self.head_kernel = kernel;
        self
    }

    pub fn with_resblock(mut self, reduce: usize, out: usize) -> Self {
        self.resblock = Some((reduce, out));
        self
    }
}

/// Appends detection branches. Existing nodes are never touched.
pub fn attach_detection_branches(backbone: &ModelGraph, specs: &[BranchSpec]) -> Result<ModelGraph> {
    let channels = backbone.channels()?;
    for s in specs {
        if !channels.contains_key(&s.feature_node_id) {
            return Err(Error::invalid(format!("unknown feature node `{}`", s.feature_node_id)));
        }
        if s.num_anchors == 0 || s.num_classes == 0 {
            return Err(Error::invalid("branch needs at least one anchor and one class"));
        }
        if s.head_kernel % 2 == 0 {
            return Err(Error::invalid("head kernel must be odd"));
        }
    }
    let mut net = Net { g: backbone.clone() };
    let mut index = 0;
    for s in specs {
        while net.g.contains(&format!("branch{index}.cls")) {
            index += 1;
        }
        let p = format!("branch{index}");
        let mut x = s.feature_node_id.clone();
        let mut ch = channels[&s.feature_node_id];
        if let Some((mid, out)) = s.resblock {
            let rp = format!("{p}.res");
            let r1 = net.conv_bn_relu(&rp, "1", &x, ch, mid, 1, 1, Role::Resblock)?;
            let r2 = net.conv_bn_relu(&rp, "2", &r1, mid, mid, 3, 1, Role::Resblock)?;
            let bn3 = net.conv_bn(&rp, "3", &r2, mid, out, 1, 1, Role::ResblockOutput)?;
            let short = net.conv_bn(&format!("{rp}.short"), "", &x, ch, out, 1, 1, Role::ResblockOutput)?;
            let add = net.node(
                format!("{rp}.add"),
                LayerKind::Add,
                &[&bn3, &short],
                Role::ResblockOutput,
            )?;
            let group_index = net.g.residual_groups.len();
            net.g.residual_groups.push(ResidualGroup {
                group_index,
                block_output_bn_ids: vec![bn3.clone()],
                downsample_bn_id: Some(short.clone()),
            });
            x = net.node(format!("{rp}.relu"), LayerKind::Relu, &[&add], Role::ResblockOutput)?;
            ch = out;
        }
        net.node(
            format!("{p}.cls"),
            LayerKind::Conv {
                kernel: s.head_kernel,
                stride: 1,
                in_channels: ch,
                out_channels: s.num_anchors * s.num_classes,
                has_bias: true,
            },
            &[&x],
            Role::Cls,
        )?;
        net.node(
            format!("{p}.loc"),
            LayerKind::Conv {
                kernel: s.head_kernel,
                stride: 1,
                in_channels: ch,
                out_channels: s.num_anchors * 4,
                has_bias: true,
            },
            &[&x],
            Role::Loc,
        )?;
        index += 1;
    }
    Ok(net.g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate;

    #[test]
    fn resnet50_has_sixteen_bottlenecks() {
        let g = build_resnet50_v1d();
        let blocks = g.iter().filter(|n| n.kind == LayerKind::Add).count();
        assert_eq!(blocks, 3 + 4 + 6 + 3);
        assert_eq!(g.residual_groups.len(), 4);
        assert!(validate(&g).is_empty());
    }

    #[test]
    fn resnet50_stem_widths() {
        let g = build_resnet50_v1d();
        let ch = g.channels().unwrap();
        assert_eq!(ch["stem.conv1"], 32);
        assert_eq!(ch["stem.conv2"], 32);
        assert_eq!(ch["stem.conv3"], 64);
        assert_eq!(ch["fc"], 1000);
    }

    #[test]
    fn toy_backbone_rejects_narrow_width() {
        assert!(matches!(build_toy_backbone(3, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn toy_groups_share_channel_count() {
        let g = build_toy_backbone(8, 2).unwrap();
        assert!(validate(&g).is_empty());
        let ch = g.channels().unwrap();
        for grp in &g.residual_groups {
            let counts: Vec<usize> = grp.members().map(|m| ch[m]).collect();
            assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
        }
    }

    #[test]
    fn branch_head_widths() {
        let g = build_toy_backbone(8, 2).unwrap();
        let d = attach_detection_branches(&g, &[BranchSpec::new("layer2.1.relu", 4, 3)]).unwrap();
        let ch = d.channels().unwrap();
        assert_eq!(ch["branch0.cls"], 12);
        assert_eq!(ch["branch0.loc"], 16);
    }

    #[test]
    fn empty_branch_list_is_identity() {
        let g = build_toy_backbone(8, 2).unwrap();
        assert_eq!(attach_detection_branches(&g, &[]).unwrap(), g);
    }

    #[test]
    fn unknown_feature_is_rejected() {
        let g = build_toy_backbone(8, 2).unwrap();
        let err = attach_detection_branches(&g, &[BranchSpec::new("nope", 4, 3)]);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
