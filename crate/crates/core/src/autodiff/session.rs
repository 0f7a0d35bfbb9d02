use std::collections::BTreeMap;

use super::tape::{BnStats, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::graph::{validate, LayerKind, ModelGraph};
use crate::params::{self, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Momentum used to fold batch statistics into the running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Executes a [`ModelGraph`] against a set of parameters.
pub struct Session {
    graph: ModelGraph,
    params: ParamStore,
    mode: Mode,
    tape: Option<Tape>,
    tape_mode: Mode,
    param_vars: Vec<(String, String, Var)>,
    optimizer: Sgd,
}

/// Activations of one forward pass, keyed by node id.
pub type Activations = BTreeMap<String, Var>;

impl Session {
    pub fn new(graph: ModelGraph, params: ParamStore) -> Result<Self> {
        let violations = validate(&graph);
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        params.check_against(&graph)?;
        Ok(Self {
            graph,
            params,
            mode: Mode::Train,
            tape: None,
            tape_mode: Mode::Train,
            param_vars: Vec::new(),
            optimizer: Sgd::default(),
        })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelGraph, ParamStore) {
        (self.graph, self.params)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn tape(&self) -> Result<&Tape> {
        self.tape
            .as_ref()
            .ok_or_else(|| Error::State("no forward pass recorded".into()))
    }

    pub fn tape_mut(&mut self) -> Result<&mut Tape> {
        self.tape
            .as_mut()
            .ok_or_else(|| Error::State("no forward pass recorded".into()))
    }

    /// Tape handle of a parameter used by the last forward pass.
    pub fn param_var(&self, node: &str, name: &str) -> Option<Var> {
        self.param_vars
            .iter()
            .find(|(n, k, _)| n == node && k == name)
            .map(|(_, _, v)| *v)
    }

    /// Runs the graph on `batch` (NCHW) and returns every node's activation.
    ///
    /// In train mode batch norms use batch statistics and fold them into the
    /// running statistics.
    pub fn forward(&mut self, batch: &Tensor) -> Result<Activations> {
        let inputs = self.graph.input_nodes();
        if inputs.len() != 1 {
            return Err(Error::invalid(format!(
                "graph must have exactly one input node, found {}",
                inputs.len()
            )));
        }
        let input_id = inputs[0].id.clone();
        if let LayerKind::Input { channels } = inputs[0].kind {
            let s = batch.shape();
            if s.len() != 4 || s[1] != channels {
                return Err(Error::invalid(format!(
                    "node `{input_id}`: expected [N, {channels}, H, W] input, got {s:?}"
                )));
            }
        }

        let train = self.mode == Mode::Train;
        let mut tape = Tape::new();
        let mut param_vars = Vec::new();
        let mut acts: Activations = BTreeMap::new();
        let order: Vec<String> = self.graph.order().to_vec();
        for id in &order {
            let node = self.graph.node(id).expect("ordered node exists").clone();
            let at = |e: Error| Error::invalid(format!("node `{id}`: {e}"));
            let input = |i: usize| -> Result<Var> {
                node.inputs
                    .get(i)
                    .and_then(|s| acts.get(s))
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("node `{id}`: missing input #{i}")))
            };
            let mut param = |store: &ParamStore, tape: &mut Tape, name: &str| -> Result<Var> {
                let t = store.require(id, name)?;
                let v = if train {
                    tape.variable(t.detached())
                } else {
                    tape.constant(t.detached())
                };
                param_vars.push((id.clone(), name.to_string(), v));
                Ok(v)
            };
            let out = match &node.kind {
                LayerKind::Input { .. } => tape.constant(batch.detached()),
                LayerKind::Conv {
                    kernel,
                    stride,
                    has_bias,
                    ..
                } => {
                    let x = input(0)?;
                    let w = param(&self.params, &mut tape, params::WEIGHT)?;
                    let b = if *has_bias {
                        Some(param(&self.params, &mut tape, params::BIAS)?)
                    } else {
                        None
                    };
                    tape.conv2d(x, w, b, *stride, kernel / 2).map_err(at)?
                }
                LayerKind::Batchnorm { eps, .. } => {
                    let x = input(0)?;
                    let gamma = param(&self.params, &mut tape, params::GAMMA)?;
                    let beta = param(&self.params, &mut tape, params::BETA)?;
                    if train {
                        let (y, moments) = tape
                            .batch_norm(x, gamma, beta, BnStats::Batch { eps: *eps })
                            .map_err(at)?;
                        let moments = moments.expect("batch statistics");
                        blend(&mut self.params, id, params::RUNNING_MEAN, &moments.mean)?;
                        blend(&mut self.params, id, params::RUNNING_VAR, &moments.var)?;
                        y
                    } else {
                        let mean = self.params.require(id, params::RUNNING_MEAN)?.data().to_vec();
                        let var = self.params.require(id, params::RUNNING_VAR)?.data().to_vec();
                        let stats = BnStats::Running {
                            mean: &mean,
                            var: &var,
                            eps: *eps,
                        };
                        tape.batch_norm(x, gamma, beta, stats).map_err(at)?.0
                    }
                }
                LayerKind::Relu => tape.relu(input(0)?),
                LayerKind::Add => tape.add(input(0)?, input(1)?).map_err(at)?,
                LayerKind::GlobalPool => tape.global_avg_pool(input(0)?).map_err(at)?,
                LayerKind::MaxPool { kernel, stride, pad } => {
                    tape.max_pool(input(0)?, *kernel, *stride, *pad).map_err(at)?
                }
                LayerKind::AvgPool { kernel, stride, pad } => {
                    tape.avg_pool(input(0)?, *kernel, *stride, *pad).map_err(at)?
                }
                LayerKind::Fc { .. } => {
                    let x = input(0)?;
                    let w = param(&self.params, &mut tape, params::WEIGHT)?;
                    let b = param(&self.params, &mut tape, params::BIAS)?;
                    tape.linear(x, w, Some(b)).map_err(at)?
                }
                LayerKind::Concat => {
                    let xs = (0..node.inputs.len()).map(&input).collect::<Result<Vec<_>>>()?;
                    tape.concat(&xs).map_err(at)?
                }
                LayerKind::Softmax => tape.softmax(input(0)?).map_err(at)?,
                LayerKind::Output => input(0)?,
            };
            acts.insert(id.clone(), out);
        }
        self.tape = Some(tape);
        self.tape_mode = self.mode;
        self.param_vars = param_vars;
        Ok(acts)
    }

    /// Forward pass returning plain tensors instead of tape handles.
    pub fn forward_values(&mut self, batch: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let acts = self.forward(batch)?;
        let tape = self.tape()?;
        Ok(acts.into_iter().map(|(id, v)| (id, tape.value(v).detached())).collect())
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(self.tape()?.value(v))
    }

    /// Back-propagates `loss` and accumulates parameter gradients.
    ///
    /// Every parameter of the graph ends up with a gradient buffer; those
    /// not on the path to `loss` get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        if self.tape_mode != Mode::Train {
            return Err(Error::State("backward requires a train-mode forward pass".into()));
        }
        let grads = tape.backward(loss)?;
        for (node, name, var) in &self.param_vars {
            let t = self.params.get_mut(node, name).expect("recorded parameter exists");
            let g = grads.get_or_zeros(*var, t.len());
            t.accumulate_grad(&g);
        }
        for (_, name, t) in self.params.iter_mut() {
            if !params::is_buffer(name) && t.grad().is_none() {
                let zeros = vec![0.0; t.len()];
                t.accumulate_grad(&zeros);
            }
        }
        Ok(())
    }

    /// One SGD step with momentum and weight decay; clears gradients.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        self.optimizer.momentum = momentum;
        self.optimizer.weight_decay = weight_decay;
        self.optimizer.step(&mut self.params, lr);
    }
}

fn blend(store: &mut ParamStore, node: &str, name: &str, batch: &[f64]) -> Result<()> {
    let t = store
        .get_mut(node, name)
        .ok_or_else(|| Error::invalid(format!("missing parameter `{node}/{name}`")))?;
    for (r, b) in t.data_mut().iter_mut().zip(batch) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`.
///
/// Weight decay applies to conv and fc weights only, not to batch-norm
/// scale/shift or biases.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<(String, String), Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        for (node, name, t) in store.iter_mut() {
            let Some(g) = t.take_grad() else { continue };
            let wd = if name == params::WEIGHT { self.weight_decay } else { 0.0 };
            let v = self
                .velocity
                .entry((node.to_string(), name.to_string()))
                .or_insert_with(|| vec![0.0; g.len()]);
            if v.len() != g.len() {
                *v = vec![0.0; g.len()];
            }
            for ((w, vel), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vel = self.momentum * *vel + gi + wd * *w;
                *w -= lr * *vel;
            }
        }
    }
}
