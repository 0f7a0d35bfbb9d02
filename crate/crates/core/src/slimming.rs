//! Sparsity-regularized training on batch-norm scale factors and the
//! global |γ| ranking that turns trained scales into a pruning plan.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting;
use crate::autodiff::{Mode, Session, Var};
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::graph::{ChannelMask, LayerKind, ModelGraph};
use crate::params::{ParamStore, GAMMA};
use crate::residual_matching;

/// `0.5·lr0·(cos(π·t/epoch_max) + 1)`.
pub fn cosine_lr(lr0: f64, epoch_max: usize, t: usize) -> Result<f64> {
    if t > epoch_max {
        return Err(Error::invalid(format!("epoch {t} outside 0..={epoch_max}")));
    }
    if epoch_max == 0 {
        return Ok(lr0);
    }
    Ok(0.5 * lr0 * ((PI * t as f64 / epoch_max as f64).cos() + 1.0))
}

/// `lr0·factor^⌊t/every⌋`.
pub fn step_lr(lr0: f64, t: usize, every: usize, factor: f64) -> f64 {
    lr0 * factor.powi((t / every.max(1)) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// ×0.1 every 30 epochs.
    SlimA,
    /// Cosine annealing to zero at `epoch_max`.
    SlimB,
}

impl Schedule {
    pub fn lr(self, lr0: f64, epoch_max: usize, t: usize) -> Result<f64> {
        match self {
            Schedule::SlimA => Ok(step_lr(lr0, t, 30, 0.1)),
            Schedule::SlimB => cosine_lr(lr0, epoch_max, t),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slim_a" | "step" => Ok(Schedule::SlimA),
            "slim_b" | "cosine" => Ok(Schedule::SlimB),
            other => Err(Error::invalid(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlimConfig {
    pub lambda: f64,
    pub schedule: Schedule,
    pub lr0: f64,
    pub epoch_max: usize,
    pub target_prune_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Emit the accuracy-vs-removed-parameters sweep after training.
    pub curve: bool,
    /// Input resolution used to cost the sweep's pruned graphs.
    pub input_hw: (usize, usize),
}

impl Default for SlimConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            schedule: Schedule::SlimB,
            lr0: 0.1,
            epoch_max: 120,
            target_prune_rate: 0.5,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            curve: false,
            input_hw: (224, 224),
        }
    }
}

impl SlimConfig {
    /// Slim-A: step decay and λ = 1e-5.
    pub fn slim_a() -> Self {
        Self {
            lambda: 1e-5,
            schedule: Schedule::SlimA,
            ..Self::default()
        }
    }

    /// Slim-B: cosine annealing and λ = 1e-4.
    pub fn slim_b() -> Self {
        Self::default()
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.target_prune_rate) {
            return Err(Error::invalid("target_prune_rate must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// γ of every batch norm, keyed by BN id.
pub fn gamma_snapshot(graph: &ModelGraph, params: &ParamStore) -> Result<BTreeMap<String, Vec<f64>>> {
    graph
        .batchnorm_ids()
        .into_iter()
        .map(|id| Ok((id.to_string(), params.require(id, GAMMA)?.data().to_vec())))
        .collect()
}

/// `task_loss + λ·Σ|γ|` over every batch norm of the graph.
pub fn slim_objective(task_loss: f64, graph: &ModelGraph, params: &ParamStore, lambda: f64) -> Result<f64> {
    let mut penalty = 0.0;
    for id in graph.batchnorm_ids() {
        penalty += params.require(id, GAMMA)?.data().iter().map(|g| g.abs()).sum::<f64>();
    }
    Ok(task_loss + lambda * penalty)
}

/// Adds `λ·Σ|γ|` to `task_loss` on the session's tape; the penalty's
/// gradient is `λ·sign(γ)` with sign(0) = 0.
pub fn slim_loss(session: &mut Session, task_loss: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(task_loss);
    }
    let gammas: Vec<Var> = session
        .graph()
        .batchnorm_ids()
        .into_iter()
        .map(|id| {
            session
                .param_var(id, GAMMA)
                .ok_or_else(|| Error::State(format!("no recorded gamma for `{id}`")))
        })
        .collect::<Result<_>>()?;
    let tape = session.tape_mut()?;
    let mut total = task_loss;
    for g in gammas {
        let a = tape.abs(g);
        let s = tape.sum(a);
        let scaled = tape.scale(s, lambda);
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// Per-BN channel masks plus the global |γ| threshold that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    pub masks: BTreeMap<String, ChannelMask>,
    pub threshold: f64,
    pub achieved_rate: f64,
    /// Layers excluded from the ranking; their masks are all-ones.
    pub protected: BTreeSet<String>,
}

impl PruningPlan {
    /// Plan that keeps every channel of every batch norm.
    pub fn keep_all(graph: &ModelGraph) -> Result<Self> {
        let ch = graph.channels()?;
        let masks = graph
            .batchnorm_ids()
            .into_iter()
            .map(|id| (id.to_string(), ChannelMask::all_kept(id, ch[id])))
            .collect();
        Ok(Self {
            masks,
            threshold: f64::NEG_INFINITY,
            achieved_rate: 0.0,
            protected: BTreeSet::new(),
        })
    }

    pub fn mask(&self, id: &str) -> Option<&ChannelMask> {
        self.masks.get(id)
    }

    /// Pruned / prunable channels over non-protected layers.
    pub fn pruned_fraction(&self) -> f64 {
        let (mut pruned, mut total) = (0usize, 0usize);
        for (id, m) in &self.masks {
            if !self.protected.contains(id) {
                pruned += m.pruned();
                total += m.len();
            }
        }
        if total == 0 {
            0.0
        } else {
            pruned as f64 / total as f64
        }
    }

    pub fn refresh_rate(&mut self) {
        self.achieved_rate = self.pruned_fraction();
    }

    /// Header lines `threshold`, `achieved_rate`, `protected`, then one
    /// `<bn id> <0/1 string>` line per layer.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "threshold {}", self.threshold);
        let _ = writeln!(out, "achieved_rate {}", self.achieved_rate);
        let protected: Vec<&str> = self.protected.iter().map(String::as_str).collect();
        let _ = writeln!(
            out,
            "protected {}",
            if protected.is_empty() {
                "-".to_string()
            } else {
                protected.join(",")
            }
        );
        for (id, m) in &self.masks {
            let _ = writeln!(out, "{id} {}", m.to_bits());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut header = |key: &str| -> Result<String> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(0, key, "missing header line"))?;
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(i + 1, key, "expected `<key> <value>`"))?;
            if k != key {
                return Err(Error::parse(i + 1, key, format!("expected `{key}`, found `{k}`")));
            }
            Ok(v.trim().to_string())
        };
        let threshold: f64 = header("threshold")?
            .parse()
            .map_err(|_| Error::parse(1, "threshold", "not a number"))?;
        let achieved_rate: f64 = header("achieved_rate")?
            .parse()
            .map_err(|_| Error::parse(2, "achieved_rate", "not a number"))?;
        let protected_raw = header("protected")?;
        let protected = if protected_raw == "-" {
            BTreeSet::new()
        } else {
            protected_raw.split(',').map(str::to_string).collect()
        };
        let mut masks = BTreeMap::new();
        for (i, line) in lines {
            let (id, bits) = line
                .trim()
                .split_once(' ')
                .ok_or_else(|| Error::parse(i + 1, "mask", "expected `<bn id> <bits>`"))?;
            let mask = ChannelMask::from_bits(id, bits.trim())
                .ok_or_else(|| Error::parse(i + 1, "mask", "mask must be a 0/1 string"))?;
            masks.insert(id.to_string(), mask);
        }
        Ok(Self {
            masks,
            threshold,
            achieved_rate,
            protected,
        })
    }
}

/// Global |γ| ranking across all non-protected layers.
///
/// The pool is sorted by (|γ|, layer id, channel index); the threshold is
/// the |γ| of the last channel inside the target fraction, and a channel is
/// kept iff its |γ| is strictly above it (ties are pruned). A layer left
/// empty gets its top-ranked channel back.
pub fn global_prune_plan(
    gammas: &BTreeMap<String, Vec<f64>>,
    target_prune_rate: f64,
    protected: &BTreeSet<String>,
) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&target_prune_rate) {
        return Err(Error::invalid(format!(
            "target prune rate {target_prune_rate} outside [0, 1)"
        )));
    }
    let mut pool: Vec<(f64, &str, usize)> = gammas
        .iter()
        .filter(|(id, _)| !protected.contains(*id))
        .flat_map(|(id, g)| g.iter().enumerate().map(move |(i, v)| (v.abs(), id.as_str(), i)))
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid("no prunable scaling factors"));
    }
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    let n_prune = ((target_prune_rate * pool.len() as f64) + 1e-9).floor() as usize;
    let threshold = if n_prune == 0 {
        f64::NEG_INFINITY
    } else {
        pool[n_prune - 1].0
    };

    let mut masks = BTreeMap::new();
    for (id, g) in gammas {
        let keep: Vec<bool> = if protected.contains(id) {
            vec![true; g.len()]
        } else {
            let mut keep: Vec<bool> = g.iter().map(|v| v.abs() > threshold).collect();
            if !keep.iter().any(|&k| k) && !keep.is_empty() {
                // Highest in the global order: largest |γ|, later index on ties.
                let best = (0..g.len())
                    .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()).then(a.cmp(&b)))
                    .expect("non-empty layer");
                keep[best] = true;
            }
            keep
        };
        masks.insert(
            id.clone(),
            ChannelMask {
                layer_id: id.clone(),
                keep,
            },
        );
    }
    let mut plan = PruningPlan {
        masks,
        threshold,
        achieved_rate: 0.0,
        protected: protected.clone(),
    };
    plan.refresh_rate();
    Ok(plan)
}

/// Classification accuracy of the session's graph in eval mode.
pub fn evaluate_accuracy(session: &mut Session, data: &LabeledImages, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let prev = session.mode();
    session.set_mode(Mode::Eval);
    let out_id = output_id(session.graph())?;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let acts = session.forward(&x)?;
        let logits = session.value(acts[&out_id])?;
        let c = logits.len() / chunk.len();
        for (row, label) in logits.data().chunks(c).zip(&labels) {
            let arg = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            if arg == *label {
                correct += 1;
            }
        }
    }
    session.set_mode(prev);
    Ok(correct as f64 / data.len() as f64)
}

fn output_id(graph: &ModelGraph) -> Result<String> {
    graph
        .iter()
        .find(|n| n.kind == LayerKind::Output)
        .map(|n| n.id.clone())
        .ok_or_else(|| Error::invalid("classification graph has no output node"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlimLogRow {
    pub epoch: usize,
    pub step: usize,
    pub task_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
}

/// One point of the accuracy-vs-removed-parameters sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub target_rate: f64,
    pub removed_params: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SlimOutcome {
    pub gammas: BTreeMap<String, Vec<f64>>,
    pub log: Vec<SlimLogRow>,
    pub curve: Vec<CurvePoint>,
}

/// Trains with the sparsity-regularized objective under the configured
/// schedule and returns the final γ snapshot.
pub fn train_slim(
    session: &mut Session,
    train: &LabeledImages,
    eval: Option<&LabeledImages>,
    config: &SlimConfig,
) -> Result<SlimOutcome> {
    config.check()?;
    let out_id = output_id(session.graph())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    session.set_mode(Mode::Train);
    for epoch in 0..config.epoch_max {
        let lr = config.schedule.lr(config.lr0, config.epoch_max, epoch)?;
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = train.batch(chunk);
            let acts = session.forward(&x)?;
            let task = session.tape_mut()?.softmax_cross_entropy(acts[&out_id], &labels)?;
            let total = slim_loss(session, task, config.lambda)?;
            let task_v = session.value(task)?.item();
            let total_v = session.value(total)?.item();
            session.backward(total)?;
            session.sgd_step(lr, config.momentum, config.weight_decay);
            log.push(SlimLogRow {
                epoch,
                step,
                task_loss: task_v,
                total_loss: total_v,
                lr,
            });
        }
    }
    let gammas = gamma_snapshot(session.graph(), session.params())?;
    let curve = match (config.curve, eval) {
        (true, Some(eval)) => sweep(session, &gammas, eval, config)?,
        _ => Vec::new(),
    };
    Ok(SlimOutcome { gammas, log, curve })
}

/// Accuracy after pruning the globally smallest |γ| channels at 5% steps.
fn sweep(
    session: &Session,
    gammas: &BTreeMap<String, Vec<f64>>,
    eval: &LabeledImages,
    config: &SlimConfig,
) -> Result<Vec<CurvePoint>> {
    let graph = session.graph();
    let base = accounting::cost(graph, config.input_hw)?.total_params;
    let mut points = Vec::new();
    for step in 0..20 {
        let rate = step as f64 * 0.05;
        let plan = global_prune_plan(gammas, rate, &BTreeSet::new())?;
        let plan = residual_matching::unify_all(&plan, &graph.residual_groups)?;
        let pruned = residual_matching::apply_plan(graph, session.params(), &plan)?;
        let params = accounting::cost(&pruned.graph, config.input_hw)?.total_params;
        let mut s = Session::new(pruned.graph, pruned.params)?;
        let accuracy = evaluate_accuracy(&mut s, eval, config.batch_size)?;
        points.push(CurvePoint {
            target_rate: rate,
            removed_params: base - params,
            accuracy,
        });
    }
    Ok(points)
}
