//! Network topology (fan/join DAGs), the text format, and execution order.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type LayerId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LayerKind {
    Data,
    Conv,
    Pool,
    Act,
    Lrn,
    Bn,
    Fc,
    Dropout,
    Softmax,
    Join,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::Data,
        LayerKind::Conv,
        LayerKind::Pool,
        LayerKind::Act,
        LayerKind::Lrn,
        LayerKind::Bn,
        LayerKind::Fc,
        LayerKind::Dropout,
        LayerKind::Softmax,
        LayerKind::Join,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Data => "DATA",
            LayerKind::Conv => "CONV",
            LayerKind::Pool => "POOL",
            LayerKind::Act => "ACT",
            LayerKind::Lrn => "LRN",
            LayerKind::Bn => "BN",
            LayerKind::Fc => "FC",
            LayerKind::Dropout => "DROPOUT",
            LayerKind::Softmax => "SOFTMAX",
            LayerKind::Join => "JOIN",
        }
    }

    /// Whether the backward step reads the layer's forward inputs.
    pub fn backward_needs_input(self) -> bool {
        !matches!(self, LayerKind::Data | LayerKind::Join | LayerKind::Softmax)
    }

    /// Whether the backward step reads the layer's own forward output.
    /// CONV, FC and BN gradients are computed from inputs and weights only.
    pub fn backward_needs_output(self) -> bool {
        !matches!(
            self,
            LayerKind::Data | LayerKind::Conv | LayerKind::Fc | LayerKind::Bn | LayerKind::Join
        )
    }

    /// Kinds whose input gradient may overwrite the incoming output gradient.
    pub fn gradient_in_place(self) -> bool {
        matches!(self, LayerKind::Act | LayerKind::Dropout | LayerKind::Lrn)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.to_ascii_uppercase();
        LayerKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == up)
            .or(match up.as_str() {
                "RELU" => Some(LayerKind::Act),
                "CONCAT" | "ADD" | "ELTWISE" => Some(LayerKind::Join),
                _ => None,
            })
            .ok_or_else(|| format!("unknown layer kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JoinMode {
    Add,
    Concat,
}

/// Kind-specific shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeParams {
    None,
    Data { c: u64, h: u64, w: u64 },
    Conv { out: u64, kernel: u64, stride: u64, pad: u64 },
    Pool { kernel: u64, stride: u64, pad: u64, global: bool },
    Fc { out: u64 },
    Join { mode: JoinMode },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: LayerId,
    pub name: String,
    pub kind: LayerKind,
    pub params: ShapeParams,
    pub prev: Vec<LayerId>,
    pub next: Vec<LayerId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDef {
    layers: Vec<LayerNode>,
    entry: LayerId,
    terminal: LayerId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: edge references undeclared layer `{name}`")]
    DanglingEdge { line: usize, name: String },
    #[error("duplicate layer name `{0}`")]
    DuplicateName(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("cycle detected through layer `{0}`")]
    Cycle(String),
    #[error("multiple DATA layers: `{0}` and `{1}`")]
    MultipleData(String, String),
    #[error("network has no DATA layer")]
    NoData,
    #[error("DATA layer `{0}` cannot have predecessors")]
    DataWithInput(String),
    #[error("layer `{0}` has {1} predecessors; only JOIN may merge")]
    NotAJoin(String, usize),
    #[error("expected exactly one terminal layer, found {0}")]
    Terminals(usize),
    #[error("network is empty")]
    Empty,
    #[error("layer `{0}` is not reachable from the DATA layer")]
    Unreachable(String),
}

/// One layer declaration before edges are attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub params: ShapeParams,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, params: ShapeParams) -> Self {
        LayerSpec { name: name.into(), kind, params }
    }
}

impl NetworkDef {
    /// Validates a layer list plus edges (by index) into a network.
    pub fn new(specs: Vec<LayerSpec>, edges: &[(LayerId, LayerId)]) -> Result<Self, NetError> {
        if specs.is_empty() {
            return Err(NetError::Empty);
        }
        let mut seen: HashMap<&str, LayerId> = HashMap::new();
        for (i, s) in specs.iter().enumerate() {
            if seen.insert(s.name.as_str(), i).is_some() {
                return Err(NetError::DuplicateName(s.name.clone()));
            }
        }
        let mut layers: Vec<LayerNode> = specs
            .into_iter()
            .enumerate()
            .map(|(id, s)| LayerNode {
                id,
                name: s.name,
                kind: s.kind,
                params: s.params,
                prev: Vec::new(),
                next: Vec::new(),
            })
            .collect();
        for &(a, b) in edges {
            if layers[a].next.contains(&b) {
                return Err(NetError::DuplicateEdge(layers[a].name.clone(), layers[b].name.clone()));
            }
            layers[a].next.push(b);
            layers[b].prev.push(a);
        }

        let mut entry = None;
        for l in &layers {
            if l.kind == LayerKind::Data {
                if let Some(e) = entry {
                    let first: &LayerNode = &layers[e];
                    return Err(NetError::MultipleData(first.name.clone(), l.name.clone()));
                }
                entry = Some(l.id);
                if !l.prev.is_empty() {
                    return Err(NetError::DataWithInput(l.name.clone()));
                }
            } else if l.prev.len() >= 2 && l.kind != LayerKind::Join {
                return Err(NetError::NotAJoin(l.name.clone(), l.prev.len()));
            }
        }
        let entry = entry.ok_or(NetError::NoData)?;
        check_acyclic(&layers)?;
        let terminals: Vec<LayerId> = layers.iter().filter(|l| l.next.is_empty()).map(|l| l.id).collect();
        if terminals.len() != 1 {
            return Err(NetError::Terminals(terminals.len()));
        }
        Ok(NetworkDef { layers, entry, terminal: terminals[0] })
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> &LayerNode {
        &self.layers[id]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn entry(&self) -> LayerId {
        self.entry
    }

    pub fn terminal(&self) -> LayerId {
        self.terminal
    }

    pub fn find(&self, name: &str) -> Option<LayerId> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Renders the network back into the text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            out.push_str(&format!("layer {} {}", l.name, l.kind));
            for (k, v) in params_to_pairs(&l.params) {
                out.push_str(&format!(" {k}={v}"));
            }
            out.push('\n');
        }
        for (a, b) in self.edge_order() {
            out.push_str(&format!("edge {} {}\n", self.layers[a].name, self.layers[b].name));
        }
        out
    }

    /// Edges in an order that rebuilds both every `next` list and every
    /// `prev` list. The edge list the network was built from is one such
    /// order, so one always exists.
    fn edge_order(&self) -> Vec<(LayerId, LayerId)> {
        let edges: Vec<(LayerId, LayerId)> =
            self.layers.iter().flat_map(|l| l.next.iter().map(move |&n| (l.id, n))).collect();
        let index: HashMap<(LayerId, LayerId), usize> = edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let mut after: Vec<Vec<usize>> = vec![Vec::new(); edges.len()];
        let mut indeg = vec![0usize; edges.len()];
        for l in &self.layers {
            let chains = [
                l.next.iter().map(|&n| index[&(l.id, n)]).collect::<Vec<_>>(),
                l.prev.iter().map(|&p| index[&(p, l.id)]).collect(),
            ];
            for chain in chains {
                for w in chain.windows(2) {
                    after[w[0]].push(w[1]);
                    indeg[w[1]] += 1;
                }
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..edges.len()).filter(|&e| indeg[e] == 0).collect();
        let mut order = Vec::with_capacity(edges.len());
        while let Some(e) = ready.pop_first() {
            order.push(edges[e]);
            for &f in &after[e] {
                indeg[f] -= 1;
                if indeg[f] == 0 {
                    ready.insert(f);
                }
            }
        }
        debug_assert_eq!(order.len(), edges.len());
        order
    }
}

fn check_acyclic(layers: &[LayerNode]) -> Result<(), NetError> {
    let mut indeg: Vec<usize> = layers.iter().map(|l| l.prev.len()).collect();
    let mut stack: Vec<LayerId> = (0..layers.len()).filter(|&i| indeg[i] == 0).collect();
    let mut done = 0;
    while let Some(i) = stack.pop() {
        done += 1;
        for &n in &layers[i].next {
            indeg[n] -= 1;
            if indeg[n] == 0 {
                stack.push(n);
            }
        }
    }
    if done == layers.len() {
        Ok(())
    } else {
        let stuck = (0..layers.len()).find(|&i| indeg[i] > 0).unwrap_or(0);
        Err(NetError::Cycle(layers[stuck].name.clone()))
    }
}

fn params_to_pairs(p: &ShapeParams) -> Vec<(&'static str, String)> {
    match *p {
        ShapeParams::None => vec![],
        ShapeParams::Data { c, h, w } => vec![("c", c.to_string()), ("h", h.to_string()), ("w", w.to_string())],
        ShapeParams::Conv { out, kernel, stride, pad } => vec![
            ("out", out.to_string()),
            ("k", kernel.to_string()),
            ("s", stride.to_string()),
            ("p", pad.to_string()),
        ],
        ShapeParams::Pool { global: true, .. } => vec![("global", "1".into())],
        ShapeParams::Pool { kernel, stride, pad, global: false } => {
            vec![("k", kernel.to_string()), ("s", stride.to_string()), ("p", pad.to_string())]
        }
        ShapeParams::Fc { out } => vec![("out", out.to_string())],
        ShapeParams::Join { mode: JoinMode::Add } => vec![("mode", "add".into())],
        ShapeParams::Join { mode: JoinMode::Concat } => vec![("mode", "concat".into())],
    }
}

fn parse_params(kind: LayerKind, kv: &HashMap<String, String>, line: usize) -> Result<ShapeParams, NetError> {
    let err = |msg: String| NetError::Syntax { line, msg };
    let num = |key: &str, default: Option<u64>| -> Result<u64, NetError> {
        match kv.get(key) {
            Some(v) => {
                let n: u64 = v.parse().map_err(|_| err(format!("`{key}` must be a non-negative integer, got `{v}`")))?;
                Ok(n)
            }
            None => default.ok_or_else(|| err(format!("{kind} layer requires `{key}`"))),
        }
    };
    let positive = |key: &str, v: u64| -> Result<u64, NetError> {
        if v == 0 {
            Err(err(format!("`{key}` must be positive")))
        } else {
            Ok(v)
        }
    };
    let allowed: &[&str] = match kind {
        LayerKind::Data => &["c", "h", "w"],
        LayerKind::Conv => &["out", "k", "s", "p"],
        LayerKind::Pool => &["k", "s", "p", "global"],
        LayerKind::Fc => &["out"],
        LayerKind::Join => &["mode"],
        _ => &[],
    };
    if let Some(k) = kv.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(err(format!("unknown parameter `{k}` for {kind}")));
    }
    Ok(match kind {
        LayerKind::Data => ShapeParams::Data {
            c: positive("c", num("c", None)?)?,
            h: positive("h", num("h", None)?)?,
            w: positive("w", num("w", None)?)?,
        },
        LayerKind::Conv => ShapeParams::Conv {
            out: positive("out", num("out", None)?)?,
            kernel: positive("k", num("k", Some(1))?)?,
            stride: positive("s", num("s", Some(1))?)?,
            pad: num("p", Some(0))?,
        },
        LayerKind::Pool => {
            let global = num("global", Some(0))? != 0;
            let kernel = positive("k", num("k", Some(2))?)?;
            ShapeParams::Pool { kernel, stride: positive("s", num("s", Some(kernel))?)?, pad: num("p", Some(0))?, global }
        }
        LayerKind::Fc => ShapeParams::Fc { out: positive("out", num("out", None)?)? },
        LayerKind::Join => {
            let mode = match kv.get("mode").map(|s| s.to_ascii_lowercase()) {
                None => JoinMode::Add,
                Some(m) if m == "add" => JoinMode::Add,
                Some(m) if m == "concat" => JoinMode::Concat,
                Some(m) => return Err(err(format!("unknown join mode `{m}`"))),
            };
            ShapeParams::Join { mode }
        }
        _ => ShapeParams::None,
    })
}

/// Parses the line-oriented network format.
///
/// ```text
/// # comment
/// layer data DATA c=3 h=32 w=32
/// layer conv1 CONV out=16 k=3 p=1
/// edge data conv1
/// ```
pub fn parse_network(text: &str) -> Result<NetworkDef, NetError> {
    let mut specs: Vec<LayerSpec> = Vec::new();
    let mut names: HashMap<String, LayerId> = HashMap::new();
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tok = content.split_whitespace();
        match tok.next() {
            Some("layer") => {
                let name = tok.next().ok_or(NetError::Syntax { line, msg: "missing layer name".into() })?;
                let kind_tok = tok.next().ok_or(NetError::Syntax { line, msg: "missing layer kind".into() })?;
                let kind: LayerKind = kind_tok.parse().map_err(|msg| NetError::Syntax { line, msg })?;
                let mut kv = HashMap::new();
                for t in tok {
                    let (k, v) = t
                        .split_once('=')
                        .ok_or_else(|| NetError::Syntax { line, msg: format!("expected key=value, got `{t}`") })?;
                    kv.insert(k.to_ascii_lowercase(), v.to_string());
                }
                let params = parse_params(kind, &kv, line)?;
                if names.insert(name.to_string(), specs.len()).is_some() {
                    return Err(NetError::DuplicateName(name.to_string()));
                }
                specs.push(LayerSpec::new(name, kind, params));
            }
            Some("edge") => {
                let (a, b) = match (tok.next(), tok.next(), tok.next()) {
                    (Some(a), Some(b), None) => (a, b),
                    _ => return Err(NetError::Syntax { line, msg: "edge takes exactly two layer names".into() }),
                };
                let lookup = |n: &str| {
                    names.get(n).copied().ok_or_else(|| NetError::DanglingEdge { line, name: n.to_string() })
                };
                edges.push((lookup(a)?, lookup(b)?));
            }
            Some(other) => {
                return Err(NetError::Syntax { line, msg: format!("unknown directive `{other}`") });
            }
            None => unreachable!(),
        }
    }
    NetworkDef::new(specs, &edges)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub forward: Vec<LayerId>,
    pub backward: Vec<LayerId>,
    pub step_of_forward: Vec<usize>,
    pub step_of_backward: Vec<usize>,
}

impl ExecutionPlan {
    /// Number of layers.
    pub fn n(&self) -> usize {
        self.forward.len()
    }

    pub fn steps(&self) -> usize {
        2 * self.forward.len()
    }

    /// Layer executed at a step of the 2N-step iteration.
    pub fn layer_at(&self, step: usize) -> LayerId {
        let n = self.n();
        if step < n {
            self.forward[step]
        } else {
            self.backward[step - n]
        }
    }

    pub fn is_backward(&self, step: usize) -> bool {
        step >= self.n()
    }
}

/// Depth-first route from the entry; a layer is emitted once all of its
/// predecessors have been emitted. Successors are visited in declaration
/// order. The dependency counters are local scratch, so repeated calls agree.
pub fn build_execution_order(net: &NetworkDef) -> Result<ExecutionPlan, NetError> {
    let n = net.len();
    let mut counter = vec![0usize; n];
    let mut forward = Vec::with_capacity(n);
    let mut stack: Vec<(LayerId, usize)> = vec![(net.entry(), 0)];
    forward.push(net.entry());
    while let Some(top) = stack.last_mut() {
        let (layer, cursor) = *top;
        let next = &net.layer(layer).next;
        if cursor == next.len() {
            stack.pop();
            continue;
        }
        top.1 += 1;
        let child = next[cursor];
        counter[child] += 1;
        if counter[child] == net.layer(child).prev.len() {
            forward.push(child);
            stack.push((child, 0));
        }
    }
    if forward.len() != n {
        let mut emitted = vec![false; n];
        for &l in &forward {
            emitted[l] = true;
        }
        let missing = (0..n).find(|&l| !emitted[l]).unwrap_or(0);
        return Err(NetError::Unreachable(net.layer(missing).name.clone()));
    }
    let backward: Vec<LayerId> = forward.iter().rev().copied().collect();
    let mut step_of_forward = vec![0; n];
    let mut step_of_backward = vec![0; n];
    for (s, &l) in forward.iter().enumerate() {
        step_of_forward[l] = s;
        step_of_backward[l] = 2 * n - 1 - s;
    }
    Ok(ExecutionPlan { forward, backward, step_of_forward, step_of_backward })
}

/// A logical tensor: the forward output of a layer or the gradient with
/// respect to that output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TensorKey {
    Activation(LayerId),
    Gradient(LayerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Forward then backward, 2N steps.
    Training,
    /// Forward only, N steps.
    Inference,
}

/// Tensors touched by one step. `writes` are produced (or accumulated into)
/// by the step; `reads` must already exist.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepDeps {
    pub reads: Vec<TensorKey>,
    pub writes: Vec<TensorKey>,
}

impl StepDeps {
    pub fn all(&self) -> impl Iterator<Item = TensorKey> + '_ {
        self.reads.iter().chain(self.writes.iter()).copied()
    }
}

pub fn tensor_dependencies(net: &NetworkDef, plan: &ExecutionPlan, pass: Pass) -> Vec<StepDeps> {
    let mut deps = Vec::with_capacity(plan.steps());
    for &l in &plan.forward {
        let node = net.layer(l);
        deps.push(StepDeps {
            reads: node.prev.iter().map(|&p| TensorKey::Activation(p)).collect(),
            writes: vec![TensorKey::Activation(l)],
        });
    }
    if pass == Pass::Inference {
        return deps;
    }
    for &l in &plan.backward {
        let node = net.layer(l);
        let mut d = StepDeps::default();
        if node.kind == LayerKind::Data {
            deps.push(d);
            continue;
        }
        if node.kind.backward_needs_input() {
            d.reads.extend(node.prev.iter().map(|&p| TensorKey::Activation(p)));
        }
        if node.kind.backward_needs_output() {
            d.reads.push(TensorKey::Activation(l));
        }
        if !node.next.is_empty() {
            d.reads.push(TensorKey::Gradient(l));
        }
        for &p in &node.prev {
            if net.layer(p).kind != LayerKind::Data {
                d.writes.push(TensorKey::Gradient(p));
            }
        }
        deps.push(d);
    }
    deps
}
