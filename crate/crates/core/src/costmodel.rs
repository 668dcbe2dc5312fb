//! Shapes, the tensor table, per-layer footprints and times, and the
//! convolution algorithm catalog.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Model;
use crate::netgraph::{
    tensor_dependencies, ExecutionPlan, JoinMode, LayerId, LayerKind, NetError, NetworkDef, Pass, ShapeParams,
    TensorKey,
};

pub type TensorId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: u64,
    pub c: u64,
    pub h: u64,
    pub w: u64,
}

impl Shape {
    pub fn new(n: u64, c: u64, h: u64, w: u64) -> Self {
        Shape { n, c, h, w }
    }

    pub fn elements(&self) -> u64 {
        self.n * self.c * self.h * self.w
    }

    pub fn bytes(&self, elem_bytes: u64) -> u64 {
        self.elements() * elem_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("layer `{layer}`: {msg}")]
    Shape { layer: String, msg: String },
    #[error("invalid cost configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoTemplate {
    pub name: String,
    /// Workspace as a multiple of the layer's output bytes.
    pub workspace_factor: f64,
    /// Time as a multiple of the layer's base time.
    pub time_factor: f64,
}

impl AlgoTemplate {
    pub fn new(name: &str, workspace_factor: f64, time_factor: f64) -> Self {
        AlgoTemplate { name: name.to_string(), workspace_factor, time_factor }
    }
}

pub fn default_conv_catalog() -> Vec<AlgoTemplate> {
    vec![
        AlgoTemplate::new("implicit_gemm", 0.0, 1.0),
        AlgoTemplate::new("gemm", 1.0, 0.8),
        AlgoTemplate::new("fft", 3.0, 0.6),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointKinds {
    /// Layer kinds whose outputs are offloaded to host memory.
    pub offload: Vec<LayerKind>,
    /// Layer kinds whose outputs are kept when recomputing.
    pub recompute: Vec<LayerKind>,
}

impl Default for CheckpointKinds {
    fn default() -> Self {
        CheckpointKinds { offload: vec![LayerKind::Conv], recompute: vec![LayerKind::Conv, LayerKind::Fc] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub elem_bytes: u64,
    pub batch: u64,
    /// Time units per output element, by kind.
    pub time_coeff: BTreeMap<LayerKind, f64>,
    pub bwd_time_factor: f64,
    /// Count weights and weight gradients as functional tensors.
    pub count_params: bool,
    /// Keep the input batch in device memory. When false the DATA output is
    /// staged from the host and is not part of device accounting.
    pub input_on_device: bool,
    pub conv_algos: Vec<AlgoTemplate>,
    pub checkpoints: CheckpointKinds,
}

impl Default for CostConfig {
    fn default() -> Self {
        let mut time_coeff = BTreeMap::new();
        for k in LayerKind::ALL {
            let c = match k {
                LayerKind::Data => 0.0,
                LayerKind::Conv | LayerKind::Fc => 1e-3,
                _ => 1e-4,
            };
            time_coeff.insert(k, c);
        }
        CostConfig {
            elem_bytes: 4,
            batch: 32,
            time_coeff,
            bwd_time_factor: 2.0,
            count_params: false,
            input_on_device: true,
            conv_algos: default_conv_catalog(),
            checkpoints: CheckpointKinds::default(),
        }
    }
}

impl CostConfig {
    pub fn with_batch(mut self, batch: u64) -> Self {
        self.batch = batch;
        self
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |m: &str| Err(CostError::Config(m.to_string()));
        if self.elem_bytes == 0 {
            return bad("elem_bytes must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.bwd_time_factor.is_finite() && self.bwd_time_factor > 0.0) {
            return bad("bwd_time_factor must be positive");
        }
        if self.time_coeff.values().any(|c| !c.is_finite() || *c < 0.0) {
            return bad("time coefficients must be finite and non-negative");
        }
        if self.conv_algos.is_empty() || !self.conv_algos.iter().any(|a| a.workspace_factor == 0.0) {
            return bad("conv catalog needs an algorithm without workspace");
        }
        if self.conv_algos.iter().any(|a| !(a.workspace_factor >= 0.0 && a.time_factor > 0.0)) {
            return bad("conv algorithm factors must be non-negative (workspace) and positive (time)");
        }
        if self.checkpoints.offload.is_empty() || self.checkpoints.recompute.is_empty() {
            return bad("checkpoint kind sets must be nonempty");
        }
        Ok(())
    }

    pub fn coeff(&self, kind: LayerKind) -> f64 {
        self.time_coeff.get(&kind).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Activation,
    Gradient,
    Parameter,
    Workspace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub id: TensorId,
    pub shape: Shape,
    pub bytes: u64,
    pub role: TensorRole,
    /// Layer whose output (or weights) this tensor holds.
    pub owner: LayerId,
    pub producer_step: usize,
    /// Every step that reads or writes the tensor, ascending.
    pub use_steps: Vec<usize>,
}

impl TensorDesc {
    pub fn last_use(&self) -> usize {
        *self.use_steps.last().expect("tensor without uses")
    }

    pub fn functional(&self) -> bool {
        matches!(self.role, TensorRole::Activation | TensorRole::Gradient)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepUse {
    /// Tensors read or written, ascending id, no duplicates.
    pub uses: Vec<TensorId>,
    /// Tensors that come into existence at this step.
    pub allocs: Vec<TensorId>,
}

/// Physical tensors of one iteration and the steps that touch them.
///
/// Gradients of layers whose backward overwrites the incoming gradient
/// share a buffer with that gradient, so a gradient buffer may carry the
/// gradients of several layers in turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorTable {
    pub tensors: Vec<TensorDesc>,
    pub activation: Vec<Option<TensorId>>,
    pub gradient: Vec<Option<TensorId>>,
    pub weights: Vec<Option<TensorId>>,
    pub weight_grads: Vec<Option<TensorId>>,
    pub steps: Vec<StepUse>,
}

fn weight_count(net: &NetworkDef, shapes: &[Shape], l: LayerId) -> u64 {
    let node = net.layer(l);
    let input = node.prev.first().map(|&p| shapes[p]);
    match (node.params, input) {
        (ShapeParams::Conv { out, kernel, .. }, Some(x)) => out * x.c * kernel * kernel + out,
        (ShapeParams::Fc { out }, Some(x)) => out * x.c * x.h * x.w + out,
        _ if node.kind == LayerKind::Bn => 2 * shapes[l].c,
        _ => 0,
    }
}

impl TensorTable {
    pub fn build(net: &NetworkDef, plan: &ExecutionPlan, pass: Pass, shapes: &[Shape], cfg: &CostConfig) -> Self {
        let deps = tensor_dependencies(net, plan, pass);
        let nl = net.len();
        let mut tensors: Vec<TensorDesc> = Vec::new();
        let mut steps: Vec<StepUse> = vec![StepUse::default(); deps.len()];
        let new_tensor = |tensors: &mut Vec<TensorDesc>, shape: Shape, role, owner, step| {
            let id = tensors.len();
            tensors.push(TensorDesc {
                id,
                shape,
                bytes: shape.bytes(cfg.elem_bytes),
                role,
                owner,
                producer_step: step,
                use_steps: Vec::new(),
            });
            id
        };

        let mut activation = vec![None; nl];
        for l in 0..nl {
            if net.layer(l).kind == LayerKind::Data && !cfg.input_on_device {
                continue;
            }
            let step = plan.step_of_forward[l];
            let id = new_tensor(&mut tensors, shapes[l], TensorRole::Activation, l, step);
            activation[l] = Some(id);
            steps[step].allocs.push(id);
        }

        let mut weights = vec![None; nl];
        let mut weight_grads = vec![None; nl];
        let last = deps.len() - 1;
        if cfg.count_params {
            for l in 0..nl {
                let count = weight_count(net, shapes, l);
                if count == 0 {
                    continue;
                }
                let shape = Shape::new(1, count, 1, 1);
                let id = new_tensor(&mut tensors, shape, TensorRole::Parameter, l, 0);
                weights[l] = Some(id);
                steps[0].allocs.push(id);
                steps[0].uses.push(id);
                steps[last].uses.push(id);
                steps[plan.step_of_forward[l]].uses.push(id);
                if pass == Pass::Training {
                    let s = plan.step_of_backward[l];
                    let g = new_tensor(&mut tensors, shape, TensorRole::Parameter, l, s);
                    weight_grads[l] = Some(g);
                    steps[s].allocs.push(g);
                    steps[s].uses.push(g);
                    steps[s].uses.push(id);
                    steps[last].uses.push(g);
                }
            }
        }

        let mut gradient: Vec<Option<TensorId>> = vec![None; nl];
        for (s, d) in deps.iter().enumerate() {
            let layer = plan.layer_at(s);
            for key in &d.reads {
                match *key {
                    TensorKey::Activation(p) => {
                        if let Some(t) = activation[p] {
                            steps[s].uses.push(t);
                        }
                    }
                    TensorKey::Gradient(p) => {
                        let t = gradient[p].expect("gradient read before it was produced");
                        steps[s].uses.push(t);
                    }
                }
            }
            for key in &d.writes {
                match *key {
                    TensorKey::Activation(p) => {
                        if let Some(t) = activation[p] {
                            steps[s].uses.push(t);
                        }
                    }
                    TensorKey::Gradient(p) => {
                        let t = match gradient[p] {
                            Some(t) => t,
                            None => {
                                let node = net.layer(layer);
                                let reuse = node.kind.gradient_in_place()
                                    && node.prev.len() == 1
                                    && shapes[p] == shapes[layer]
                                    && gradient[layer].is_some();
                                let t = if reuse {
                                    gradient[layer].unwrap()
                                } else {
                                    let t = new_tensor(&mut tensors, shapes[p], TensorRole::Gradient, p, s);
                                    steps[s].allocs.push(t);
                                    t
                                };
                                gradient[p] = Some(t);
                                t
                            }
                        };
                        steps[s].uses.push(t);
                    }
                }
            }
        }
        for (s, st) in steps.iter_mut().enumerate() {
            st.uses.sort_unstable();
            st.uses.dedup();
            for &t in &st.uses {
                tensors[t].use_steps.push(s);
            }
        }
        TensorTable { tensors, activation, gradient, weights, weight_grads, steps }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn bytes(&self, t: TensorId) -> u64 {
        self.tensors[t].bytes
    }

    pub fn total_bytes(&self) -> u64 {
        self.tensors.iter().map(|t| t.bytes).sum()
    }
}

/// Output shape of every layer, propagated from DATA.
pub fn infer_shapes(net: &NetworkDef, plan: &ExecutionPlan, batch: u64) -> Result<Vec<Shape>, CostError> {
    if batch == 0 {
        return Err(CostError::Config("batch must be positive".into()));
    }
    let mut shapes = vec![Shape::new(0, 0, 0, 0); net.len()];
    for &l in &plan.forward {
        let node = net.layer(l);
        let err = |msg: String| CostError::Shape { layer: node.name.clone(), msg };
        let x = node.prev.first().map(|&p| shapes[p]);
        let window = |size: u64, k: u64, s: u64, p: u64| -> Result<u64, CostError> {
            if size + 2 * p < k {
                return Err(err(format!("kernel {k} larger than padded input {}", size + 2 * p)));
            }
            Ok((size + 2 * p - k) / s + 1)
        };
        let out = match (node.params, x) {
            (ShapeParams::Data { c, h, w }, _) => Shape::new(batch, c, h, w),
            (ShapeParams::Conv { out, kernel, stride, pad }, Some(x)) => {
                Shape::new(x.n, out, window(x.h, kernel, stride, pad)?, window(x.w, kernel, stride, pad)?)
            }
            (ShapeParams::Pool { global: true, .. }, Some(x)) => Shape::new(x.n, x.c, 1, 1),
            (ShapeParams::Pool { kernel, stride, pad, .. }, Some(x)) => {
                Shape::new(x.n, x.c, window(x.h, kernel, stride, pad)?, window(x.w, kernel, stride, pad)?)
            }
            (ShapeParams::Fc { out }, Some(x)) => Shape::new(x.n, out, 1, 1),
            (ShapeParams::Join { mode }, Some(first)) => {
                let ins: Vec<Shape> = node.prev.iter().map(|&p| shapes[p]).collect();
                match mode {
                    JoinMode::Add => {
                        if let Some(s) = ins.iter().find(|s| **s != first) {
                            return Err(err(format!("element-wise join of unequal shapes {first:?} and {s:?}")));
                        }
                        first
                    }
                    JoinMode::Concat => {
                        if let Some(s) = ins.iter().find(|s| (s.n, s.h, s.w) != (first.n, first.h, first.w)) {
                            return Err(err(format!("concat join of incompatible shapes {first:?} and {s:?}")));
                        }
                        Shape::new(first.n, ins.iter().map(|s| s.c).sum(), first.h, first.w)
                    }
                }
            }
            (_, Some(x)) => x,
            (_, None) => return Err(err("layer has no input".into())),
        };
        if out.elements() == 0 {
            return Err(err("empty output shape".into()));
        }
        shapes[l] = out;
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvAlgo {
    pub name: String,
    pub workspace_bytes: u64,
    /// Forward time; backward steps scale it by the backward factor.
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: LayerId,
    pub name: String,
    pub kind: LayerKind,
    pub output: Shape,
    /// l^f: bytes that come into existence at the forward step.
    pub fwd_bytes: u64,
    /// l^b: bytes that come into existence at the backward step.
    pub bwd_bytes: u64,
    pub param_bytes: u64,
    pub fwd_time: f64,
    pub bwd_time: f64,
    pub conv_algos: Vec<ConvAlgo>,
    /// Least resident bytes while this layer executes, with every
    /// checkpoint offloaded and every other tensor recomputed on demand.
    pub working_set_bytes: u64,
}

pub(crate) fn base_costs(net: &NetworkDef, plan: &ExecutionPlan, shapes: &[Shape], table: &TensorTable, cfg: &CostConfig) -> Vec<LayerCost> {
    let n = net.len();
    let mut fwd_bytes = vec![0u64; n];
    let mut bwd_bytes = vec![0u64; n];
    for t in &table.tensors {
        match t.role {
            TensorRole::Activation => fwd_bytes[t.owner] += t.bytes,
            TensorRole::Gradient => bwd_bytes[plan.layer_at(t.producer_step)] += t.bytes,
            TensorRole::Parameter => {
                if table.weights[t.owner] == Some(t.id) {
                    fwd_bytes[t.owner] += t.bytes;
                } else {
                    bwd_bytes[t.owner] += t.bytes;
                }
            }
            TensorRole::Workspace => {}
        }
    }
    (0..n)
        .map(|l| {
            let node = net.layer(l);
            let fwd_time = cfg.coeff(node.kind) * shapes[l].elements() as f64;
            let out_bytes = shapes[l].bytes(cfg.elem_bytes);
            let conv_algos = if node.kind == LayerKind::Conv {
                cfg.conv_algos
                    .iter()
                    .map(|a| ConvAlgo {
                        name: a.name.clone(),
                        workspace_bytes: (a.workspace_factor * out_bytes as f64).round() as u64,
                        time: fwd_time * a.time_factor,
                    })
                    .collect()
            } else {
                Vec::new()
            };
            LayerCost {
                layer: l,
                name: node.name.clone(),
                kind: node.kind,
                output: shapes[l],
                fwd_bytes: fwd_bytes[l],
                bwd_bytes: bwd_bytes[l],
                param_bytes: weight_count(net, shapes, l) * cfg.elem_bytes,
                fwd_time,
                bwd_time: if node.kind == LayerKind::Data { 0.0 } else { fwd_time * cfg.bwd_time_factor },
                conv_algos,
                working_set_bytes: 0,
            }
        })
        .collect()
}

pub fn layer_costs(net: &NetworkDef, cfg: &CostConfig) -> Result<Vec<LayerCost>, CostError> {
    Ok(Model::build(net, cfg)?.costs)
}

/// Largest per-layer working set and the layer holding it (lowest id on ties).
pub fn l_peak(costs: &[LayerCost]) -> (u64, LayerId) {
    let mut best = (0u64, 0usize);
    for (i, c) in costs.iter().enumerate() {
        if i == 0 || c.working_set_bytes > best.0 {
            best = (c.working_set_bytes, c.layer);
        }
    }
    best
}

/// Everything allocated and nothing freed: Σ l^f + Σ l^b.
pub fn baseline_peak(costs: &[LayerCost]) -> u64 {
    costs.iter().map(|c| c.fwd_bytes + c.bwd_bytes).sum()
}
