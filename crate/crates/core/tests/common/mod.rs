#![allow(dead_code)]

pub mod grad;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimforge::autodiff::{Tape, Tensor, Var};
use slimforge::graph::{
    attach_detection_branches, build_toy_backbone_with, BranchSpec, ChannelMask, LayerKind, LayerNode, ModelGraph,
    Role, ToyBackboneConfig, TAG_DEPLOYABLE, TAG_SLIMMABLE,
};
use slimforge::params::{ParamStore, BETA, GAMMA, RUNNING_MEAN, RUNNING_VAR};
use slimforge::slimming::PruningPlan;
use slimforge::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

/// Relative error ‖a − n‖ / (‖a‖ + ‖n‖) between the tape gradient of
/// `f(inputs)` reduced by fixed random weights and a central difference.
pub fn gradient_error(inputs: &[Tensor], weights_seed: u64, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let weights: std::cell::RefCell<Option<Vec<f64>>> = std::cell::RefCell::new(None);
    let eval = |xs: &[Tensor], grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("op evaluates");
        let len = tape.value(out).len();
        let w = weights
            .borrow_mut()
            .get_or_insert_with(|| {
                let mut r = rng(weights_seed);
                (0..len).map(|_| r.gen_range(0.5..1.5)).collect()
            })
            .clone();
        let loss = tape.dot_const(out, w).unwrap();
        let value = tape.value(loss).item();
        if !grad {
            return (value, Vec::new());
        }
        let g = tape.backward(loss).unwrap();
        let grads = vars.iter().zip(xs).map(|(v, t)| g.get_or_zeros(*v, t.len())).collect();
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let h = 1e-6;
    let (mut diff, mut norm) = (0.0, 0.0);
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            let a = analytic[k][i];
            diff += (a - numeric).powi(2);
            norm += a * a + numeric * numeric;
        }
    }
    if norm == 0.0 {
        0.0
    } else {
        diff.sqrt() / norm.sqrt()
    }
}

/// Plan computed by pairwise ranking: a channel's rank is the number of
/// channels before it in the (|γ|, layer, index) order.
pub fn oracle_plan(
    gammas: &BTreeMap<String, Vec<f64>>,
    rate: f64,
    protected: &BTreeSet<String>,
) -> BTreeMap<String, Vec<bool>> {
    let pool: Vec<(f64, &str, usize)> = gammas
        .iter()
        .filter(|(k, _)| !protected.contains(*k))
        .flat_map(|(k, g)| g.iter().enumerate().map(move |(i, v)| (v.abs(), k.as_str(), i)))
        .collect();
    let before = |a: &(f64, &str, usize), b: &(f64, &str, usize)| {
        a.0 < b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2)))
    };
    let rank: Vec<usize> = pool
        .iter()
        .map(|c| pool.iter().filter(|o| before(o, c)).count())
        .collect();
    let n_prune = (rate * pool.len() as f64 + 1e-9).floor() as usize;
    let threshold = if n_prune == 0 {
        f64::NEG_INFINITY
    } else {
        pool[rank.iter().position(|&r| r == n_prune - 1).unwrap()].0
    };
    let mut out = BTreeMap::new();
    for (k, g) in gammas {
        if protected.contains(k) {
            out.insert(k.clone(), vec![true; g.len()]);
            continue;
        }
        let mut keep: Vec<bool> = g.iter().map(|v| v.abs() > threshold).collect();
        if !keep.contains(&true) {
            let (best, _) = pool
                .iter()
                .zip(&rank)
                .filter(|(c, _)| c.1 == k)
                .max_by_key(|(_, r)| **r)
                .unwrap();
            keep[best.2] = true;
        }
        out.insert(k.clone(), keep);
    }
    out
}

/// Toy backbones of random shape, sometimes with detection branches, or a
/// plain conv chain with pooling and concat.
pub fn random_graph(r: &mut ChaCha8Rng) -> ModelGraph {
    match r.gen_range(0..3) {
        0 | 1 => {
            let cfg = ToyBackboneConfig {
                width: r.gen_range(4..=8),
                groups: r.gen_range(1..=3),
                blocks_per_group: r.gen_range(1..=2),
                expansion: r.gen_range(1..=3),
                num_classes: r.gen_range(2..=4),
                input_channels: r.gen_range(1..=3),
            };
            let g = build_toy_backbone_with(cfg).unwrap();
            if r.gen_bool(0.5) {
                let feature = g.iter().find(|n| n.kind == LayerKind::GlobalPool).unwrap().inputs[0].clone();
                let mut spec = BranchSpec::new(feature, r.gen_range(1..=2), 3);
                if r.gen_bool(0.5) {
                    spec = spec.with_resblock(r.gen_range(2..=4), r.gen_range(4..=8));
                }
                attach_detection_branches(&g, &[spec]).unwrap()
            } else {
                g
            }
        }
        _ => plain_chain(r),
    }
}

fn plain_chain(r: &mut ChaCha8Rng) -> ModelGraph {
    let mut g = ModelGraph::new();
    g.tags.insert(TAG_DEPLOYABLE.into());
    g.tags.insert(TAG_SLIMMABLE.into());
    let cin = r.gen_range(1..=3);
    g.push(LayerNode::new(
        "input",
        LayerKind::Input { channels: cin },
        &[],
        Role::Backbone,
    ))
    .unwrap();
    let mut x = "input".to_string();
    let mut ch = cin;
    let depth = r.gen_range(1..=4);
    for i in 0..depth {
        let out = r.gen_range(2..=6);
        let k = if r.gen_bool(0.5) { 1 } else { 3 };
        let conv = |id: String, from: &str, cin: usize| {
            LayerNode::new(
                id,
                LayerKind::Conv {
                    kernel: k,
                    stride: 1,
                    in_channels: cin,
                    out_channels: out,
                    has_bias: false,
                },
                &[from],
                Role::Backbone,
            )
        };
        let bn = |id: String, from: &str| {
            LayerNode::new(
                id,
                LayerKind::Batchnorm {
                    channels: out,
                    eps: 1e-5,
                },
                &[from],
                Role::Backbone,
            )
        };
        g.push(conv(format!("c{i}"), &x, ch)).unwrap();
        g.push(bn(format!("b{i}"), &format!("c{i}"))).unwrap();
        g.push(LayerNode::new(
            format!("r{i}"),
            LayerKind::Relu,
            &[&format!("b{i}")],
            Role::Backbone,
        ))
        .unwrap();
        let mut y = format!("r{i}");
        let mut ych = out;
        if r.gen_bool(0.4) {
            // parallel path joined by concat
            g.push(conv(format!("p{i}"), &x, ch)).unwrap();
            g.push(bn(format!("pb{i}"), &format!("p{i}"))).unwrap();
            g.push(LayerNode::new(
                format!("cat{i}"),
                LayerKind::Concat,
                &[&y, &format!("pb{i}")],
                Role::Backbone,
            ))
            .unwrap();
            y = format!("cat{i}");
            ych = 2 * out;
        }
        if r.gen_bool(0.3) {
            g.push(LayerNode::new(
                format!("mp{i}"),
                LayerKind::MaxPool {
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                &[&y],
                Role::Backbone,
            ))
            .unwrap();
            y = format!("mp{i}");
        }
        x = y;
        ch = ych;
    }
    g.push(LayerNode::new("pool", LayerKind::GlobalPool, &[&x], Role::Backbone))
        .unwrap();
    g.push(LayerNode::new(
        "fc",
        LayerKind::Fc {
            in_channels: ch,
            out_channels: 3,
        },
        &["pool"],
        Role::Backbone,
    ))
    .unwrap();
    g.push(LayerNode::new("output", LayerKind::Output, &["fc"], Role::Backbone))
        .unwrap();
    g
}

/// He-initialized parameters with randomized batch-norm state.
pub fn random_params(graph: &ModelGraph, r: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::init_for_graph(graph, r);
    for id in graph.batchnorm_ids() {
        let n = p.require(id, GAMMA).unwrap().len();
        for (name, lo, hi) in [
            (GAMMA, -1.5, 1.5),
            (BETA, -0.5, 0.5),
            (RUNNING_MEAN, -0.3, 0.3),
            (RUNNING_VAR, 0.5, 2.0),
        ] {
            let t = Tensor::new(vec![n], (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap();
            p.insert(id, name, t);
        }
    }
    p
}

/// Random per-BN masks with at least one kept channel each.
pub fn random_plan(graph: &ModelGraph, r: &mut ChaCha8Rng, keep_prob: f64) -> PruningPlan {
    let ch = graph.channels().unwrap();
    let masks = graph
        .batchnorm_ids()
        .into_iter()
        .map(|id| {
            let mut keep: Vec<bool> = (0..ch[id]).map(|_| r.gen_bool(keep_prob)).collect();
            if !keep.contains(&true) {
                let i = r.gen_range(0..keep.len());
                keep[i] = true;
            }
            (
                id.to_string(),
                ChannelMask {
                    layer_id: id.to_string(),
                    keep,
                },
            )
        })
        .collect();
    let mut plan = PruningPlan {
        masks,
        threshold: 0.0,
        achieved_rate: 0.0,
        protected: BTreeSet::new(),
    };
    plan.refresh_rate();
    plan
}

/// Input size every random graph accepts.
pub const RANDOM_GRAPH_HW: (usize, usize) = (16, 16);

/// Output nodes compared by function-preservation checks.
pub fn output_ids(graph: &ModelGraph) -> Vec<String> {
    graph
        .iter()
        .filter(|n| graph.consumers(&n.id).is_empty())
        .map(|n| n.id.clone())
        .collect()
}

/// Zeroes γ and β of every channel the (unified) plan prunes, applies the
/// plan, and returns the max abs difference of eval-mode outputs on a
/// random batch.
pub fn preservation_diff(graph: &ModelGraph, r: &mut ChaCha8Rng) -> f64 {
    use slimforge::autodiff::{Mode, Session};
    use slimforge::residual_matching::{apply_plan, unify_all};

    let mut params = random_params(graph, r);
    let plan = unify_all(&random_plan(graph, r, 0.6), &graph.residual_groups).unwrap();
    for (id, m) in &plan.masks {
        for name in [GAMMA, BETA] {
            let t = params.get_mut(id, name).unwrap();
            for (i, &k) in m.keep.iter().enumerate() {
                if !k {
                    t.data_mut()[i] = 0.0;
                }
            }
        }
    }
    let pruned = apply_plan(graph, &params, &plan).unwrap();
    assert!(slimforge::graph::validate(&pruned.graph).is_empty());

    let cin = match graph.input_nodes()[0].kind {
        LayerKind::Input { channels } => channels,
        _ => unreachable!(),
    };
    let (h, w) = RANDOM_GRAPH_HW;
    let x = random_tensor(r, &[2, cin, h, w], 1.0);
    let outputs = output_ids(graph);
    let run = |g: ModelGraph, p: ParamStore| {
        let mut s = Session::new(g, p).unwrap();
        s.set_mode(Mode::Eval);
        s.forward_values(&x).unwrap()
    };
    let before = run(graph.clone(), params);
    let after = run(pruned.graph, pruned.params);
    outputs
        .iter()
        .map(|id| before[id].max_abs_diff(&after[id]))
        .fold(0.0, f64::max)
}

/// γ configurations with 2–8 layers of 2–64 channels. Values are drawn
/// from a small grid half the time so ties and all-zero layers are common.
pub fn random_gammas(r: &mut ChaCha8Rng) -> BTreeMap<String, Vec<f64>> {
    let layers = r.gen_range(2..=8);
    let coarse = r.gen_bool(0.5);
    (0..layers)
        .map(|l| {
            let n = r.gen_range(2..=64);
            let zero_layer = r.gen_bool(0.1);
            let g = (0..n)
                .map(|_| {
                    let v: f64 = if zero_layer {
                        0.0
                    } else if coarse {
                        r.gen_range(0..4) as f64 * 0.25
                    } else {
                        r.gen_range(0.0..1.0)
                    };
                    if r.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            (format!("layer{l}.bn"), g)
        })
        .collect()
}
