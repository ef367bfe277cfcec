//! Computation-graph IR.
//!
//! A [`Graph`] owns its tensors and nodes in declaration order and refers to
//! them through the [`TensorId`] / [`NodeId`] index newtypes. Edges are not
//! stored; they follow from producer/consumer relations and are materialised
//! on demand by [`Graph::adjacency`].
//!
//! The JSON wire format lives in [`json`], structural checks in [`validate`]
//! and static shape propagation in [`shape`].

pub mod json;
pub mod shape;
pub mod validate;

use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use json::{parse_graph, DimDoc, GraphDoc, NodeDoc, TensorDoc};
pub use shape::{infer_shapes, ShapeError};
pub use validate::{validate, CheckResult, ValidationReport};

/// Index of a tensor inside its owning [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorId(pub usize);

/// Index of a node inside its owning [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t#{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    I8,
    I32,
}

impl DType {
    pub fn size_bytes(self) -> u64 {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }
}

/// One tensor dimension. Symbolic dims are planned at their declared bound.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Dim {
    Fixed(u64),
    Sym { name: String, max: Option<u64> },
}

impl Dim {
    pub fn sym(name: impl Into<String>, max: u64) -> Self {
        Dim::Sym {
            name: name.into(),
            max: Some(max),
        }
    }

    /// Concrete value, or the max bound for symbolic dims.
    pub fn bound(&self) -> Option<u64> {
        match self {
            Dim::Fixed(v) => Some(*v),
            Dim::Sym { max, .. } => *max,
        }
    }

    pub fn is_symbolic(&self) -> bool {
        matches!(self, Dim::Sym { .. })
    }

    /// Applies `f` to the bound, keeping the symbolic name if there is one.
    pub(crate) fn map_bound(&self, f: impl FnOnce(u64) -> u64) -> Option<Dim> {
        match self {
            Dim::Fixed(v) => Some(Dim::Fixed(f(*v))),
            Dim::Sym { name, max } => max.map(|m| Dim::Sym {
                name: name.clone(),
                max: Some(f(m)),
            }),
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Fixed(v) => write!(f, "{v}"),
            Dim::Sym { name, max: Some(m) } => write!(f, "{name}<={m}"),
            Dim::Sym { name, max: None } => write!(f, "{name}<=?"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub Vec<Dim>);

impl Shape {
    pub fn fixed(dims: &[u64]) -> Self {
        Shape(dims.iter().map(|&d| Dim::Fixed(d)).collect())
    }

    pub fn dims(&self) -> &[Dim] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Bounds of every dimension, `None` if any symbolic dim is unbounded.
    pub fn bounds(&self) -> Option<Vec<u64>> {
        self.0.iter().map(Dim::bound).collect()
    }

    /// Element count at the max bound. A rank-0 shape is a scalar.
    pub fn numel(&self) -> Option<u64> {
        self.0
            .iter()
            .try_fold(1u64, |acc, d| d.bound().map(|b| acc.saturating_mul(b)))
    }

    pub fn is_fully_bounded(&self) -> bool {
        self.0.iter().all(|d| d.bound().is_some())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Producer {
    Node(NodeId),
    GraphInput,
    /// Weights and other static data; never planned into arenas.
    Constant,
    /// Neither produced nor declared; flagged by validation.
    Missing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorDef {
    pub name: String,
    pub dtype: DType,
    pub shape: Option<Shape>,
    pub constant: bool,
    pub producer: Producer,
    /// Consuming nodes in ascending order, one entry per distinct node.
    pub consumers: Vec<NodeId>,
}

impl TensorDef {
    /// `numel x sizeof(dtype)` at the max bound of every dimension.
    pub fn byte_size(&self) -> Option<u64> {
        self.shape
            .as_ref()
            .and_then(Shape::numel)
            .map(|n| n.saturating_mul(self.dtype.size_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    Accelerator,
}

/// Devices able to run a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DeviceSet {
    pub cpu: bool,
    pub accelerator: bool,
}

impl DeviceSet {
    pub const CPU: DeviceSet = DeviceSet {
        cpu: true,
        accelerator: false,
    };
    pub const CPU_AND_ACCELERATOR: DeviceSet = DeviceSet {
        cpu: true,
        accelerator: true,
    };
    pub const ACCELERATOR: DeviceSet = DeviceSet {
        cpu: false,
        accelerator: true,
    };

    pub fn contains(&self, d: Device) -> bool {
        match d {
            Device::Cpu => self.cpu,
            Device::Accelerator => self.accelerator,
        }
    }

    pub fn to_vec(self) -> Vec<Device> {
        let mut v = Vec::with_capacity(2);
        if self.cpu {
            v.push(Device::Cpu);
        }
        if self.accelerator {
            v.push(Device::Accelerator);
        }
        v
    }
}

impl FromIterator<Device> for DeviceSet {
    fn from_iter<I: IntoIterator<Item = Device>>(iter: I) -> Self {
        let mut s = DeviceSet::default();
        for d in iter {
            match d {
                Device::Cpu => s.cpu = true,
                Device::Accelerator => s.accelerator = true,
            }
        }
        s
    }
}

/// Coarse operator classes, each with one FLOP estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    Conv,
    MatMul,
    Elementwise,
    Pooling,
    Reduce,
    Misc,
    Delegate,
}

const CONV_OPS: &[&str] = &["Conv", "Conv2D", "DepthwiseConv2D", "DepthwiseConv"];
const MATMUL_OPS: &[&str] = &["MatMul", "BatchMatMul", "Gemm", "FullyConnected", "Dense"];
const ELEMENTWISE_OPS: &[&str] = &[
    "Add",
    "AddN",
    "Sub",
    "Mul",
    "Div",
    "Relu",
    "ReLU",
    "Relu6",
    "LeakyRelu",
    "Sigmoid",
    "Tanh",
    "Gelu",
    "GELU",
    "Silu",
    "HardSwish",
    "Exp",
    "Log",
    "Sqrt",
    "Rsqrt",
    "Pow",
    "Maximum",
    "Minimum",
    "Neg",
    "Abs",
    "Erf",
    "Softmax",
    "LayerNorm",
    "BatchNorm",
    "Clip",
    "Where",
];
const POOLING_OPS: &[&str] = &[
    "AvgPool",
    "MaxPool",
    "AveragePool2D",
    "MaxPool2D",
    "GlobalAveragePool",
    "GlobalMaxPool",
];
const REDUCE_OPS: &[&str] = &[
    "Mean",
    "Sum",
    "ReduceMean",
    "ReduceSum",
    "ReduceMax",
    "ReduceMin",
];
const MISC_OPS: &[&str] = &[
    "Reshape",
    "Slice",
    "Transpose",
    "Concat",
    "Split",
    "Gather",
    "Squeeze",
    "Unsqueeze",
    "Pad",
    "Identity",
    "Cast",
    "Shape",
    "Expand",
    "Tile",
    "NonZero",
    "TopK",
    "NonMaxSuppression",
    "Resize",
    "If",
    "While",
    "Loop",
];

pub const DELEGATE_OP: &str = "Delegate";

impl OpClass {
    /// Maps an operator name to its class. The flag is false for names that
    /// fell through to the `Misc` catch-all without being recognised.
    pub fn classify(op: &str) -> (OpClass, bool) {
        let table: [(&[&str], OpClass); 6] = [
            (CONV_OPS, OpClass::Conv),
            (MATMUL_OPS, OpClass::MatMul),
            (ELEMENTWISE_OPS, OpClass::Elementwise),
            (POOLING_OPS, OpClass::Pooling),
            (REDUCE_OPS, OpClass::Reduce),
            (MISC_OPS, OpClass::Misc),
        ];
        if op == DELEGATE_OP {
            return (OpClass::Delegate, true);
        }
        for (names, class) in table {
            if names.contains(&op) {
                return (class, true);
            }
        }
        (OpClass::Misc, false)
    }
}

pub type Attrs = serde_json::Map<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: String,
    pub class: OpClass,
    /// False when `op` is not a recognised operator name.
    pub op_known: bool,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    pub attrs: Attrs,
    pub devices: DeviceSet,
    pub control_flow: bool,
}

impl Node {
    pub fn is_delegate(&self) -> bool {
        self.class == OpClass::Delegate
    }

    pub fn attr_u64(&self, key: &str) -> Option<u64> {
        self.attrs.get(key).and_then(serde_json::Value::as_u64)
    }

    pub fn attr_f64(&self, key: &str) -> Option<f64> {
        self.attrs.get(key).and_then(serde_json::Value::as_f64)
    }

    /// Reads `[a, b]`, or a single integer expanded to `[v, v]`.
    pub fn attr_pair(&self, key: &str) -> Option<(u64, u64)> {
        match self.attrs.get(key)? {
            serde_json::Value::Number(n) => n.as_u64().map(|v| (v, v)),
            serde_json::Value::Array(a) if a.len() == 2 => Some((a[0].as_u64()?, a[1].as_u64()?)),
            _ => None,
        }
    }

    pub fn attr_i64_list(&self, key: &str) -> Option<Vec<i64>> {
        self.attrs
            .get(key)?
            .as_array()?
            .iter()
            .map(serde_json::Value::as_i64)
            .collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("malformed graph JSON: {0}")]
    Json(String),
    #[error("node '{node}' {role} #{index} references undefined tensor '{tensor}'")]
    DanglingTensor {
        node: String,
        role: &'static str,
        index: usize,
        tensor: String,
    },
    #[error("graph {role} references undefined tensor '{tensor}'")]
    DanglingGraphRef { role: &'static str, tensor: String },
    #[error("duplicate {kind} id '{id}'")]
    DuplicateId { kind: &'static str, id: String },
    #[error("tensor '{tensor}' has more than one producer ({first} and {second})")]
    MultipleProducers {
        tensor: String,
        first: String,
        second: String,
    },
    #[error(
        "graph contains a cycle through {} node(s), e.g. '{example}'",
        remaining
    )]
    Cycle { remaining: usize, example: String },
}

/// De-duplicated successor/predecessor lists, sorted ascending.
#[derive(Debug, Clone, Default)]
pub struct Adjacency {
    pub succ: Vec<Vec<NodeId>>,
    pub pred: Vec<Vec<NodeId>>,
}

impl Adjacency {
    pub fn in_degree(&self, n: NodeId) -> usize {
        self.pred[n.0].len()
    }

    pub fn out_degree(&self, n: NodeId) -> usize {
        self.succ[n.0].len()
    }

    pub fn edge_count(&self) -> usize {
        self.succ.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    tensors: Vec<TensorDef>,
    nodes: Vec<Node>,
    inputs: Vec<TensorId>,
    outputs: Vec<TensorId>,
    /// `is_output[t]` mirrors membership in `outputs`.
    is_output: Vec<bool>,
    tensor_index: HashMap<String, TensorId>,
    node_index: HashMap<String, NodeId>,
}

impl Graph {
    pub fn tensors(&self) -> &[TensorDef] {
        &self.tensors
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn tensor(&self, id: TensorId) -> &TensorDef {
        &self.tensors[id.0]
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn inputs(&self) -> &[TensorId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[TensorId] {
        &self.outputs
    }

    pub fn tensor_id(&self, name: &str) -> Option<TensorId> {
        self.tensor_index.get(name).copied()
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.node_index.get(name).copied()
    }

    pub fn is_graph_output(&self, t: TensorId) -> bool {
        self.is_output[t.0]
    }

    pub(crate) fn set_shape(&mut self, t: TensorId, shape: Shape) {
        self.tensors[t.0].shape = Some(shape);
    }

    pub fn adjacency(&self) -> Adjacency {
        let n = self.nodes.len();
        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for &t in &node.outputs {
                succ[i].extend_from_slice(&self.tensors[t.0].consumers);
            }
            for &t in &node.inputs {
                if let Producer::Node(p) = self.tensors[t.0].producer {
                    pred[i].push(p);
                }
            }
        }
        for list in succ.iter_mut().chain(pred.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        Adjacency { succ, pred }
    }

    /// Kahn's algorithm seeded in ascending node order, FIFO thereafter.
    pub fn topo_order(&self, adj: &Adjacency) -> Result<Vec<NodeId>, GraphError> {
        let n = self.nodes.len();
        let mut indeg: Vec<usize> = adj.pred.iter().map(Vec::len).collect();
        let mut queue: VecDeque<NodeId> = (0..n).filter(|&i| indeg[i] == 0).map(NodeId).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &s in &adj.succ[v.0] {
                indeg[s.0] -= 1;
                if indeg[s.0] == 0 {
                    queue.push_back(s);
                }
            }
        }
        if order.len() != n {
            let example = (0..n)
                .find(|&i| indeg[i] > 0)
                .map(|i| self.nodes[i].name.clone())
                .unwrap_or_default();
            return Err(GraphError::Cycle {
                remaining: n - order.len(),
                example,
            });
        }
        Ok(order)
    }

    /// Builds a graph from its document form, resolving every name.
    pub fn from_doc(doc: &GraphDoc) -> Result<Graph, GraphError> {
        let mut tensors = Vec::with_capacity(doc.tensors.len());
        let mut tensor_index = HashMap::with_capacity(doc.tensors.len());
        for t in &doc.tensors {
            let id = TensorId(tensors.len());
            if tensor_index.insert(t.id.clone(), id).is_some() {
                return Err(GraphError::DuplicateId {
                    kind: "tensor",
                    id: t.id.clone(),
                });
            }
            tensors.push(TensorDef {
                name: t.id.clone(),
                dtype: t.dtype.unwrap_or(DType::F32),
                shape: t
                    .shape
                    .as_ref()
                    .map(|dims| Shape(dims.iter().map(DimDoc::to_dim).collect())),
                constant: t.constant,
                producer: if t.constant {
                    Producer::Constant
                } else {
                    Producer::Missing
                },
                consumers: Vec::new(),
            });
        }

        let resolve_graph_ref = |role: &'static str, name: &str| {
            tensor_index
                .get(name)
                .copied()
                .ok_or_else(|| GraphError::DanglingGraphRef {
                    role,
                    tensor: name.to_string(),
                })
        };
        let inputs = doc
            .inputs
            .iter()
            .map(|s| resolve_graph_ref("input", s))
            .collect::<Result<Vec<_>, _>>()?;
        let outputs = doc
            .outputs
            .iter()
            .map(|s| resolve_graph_ref("output", s))
            .collect::<Result<Vec<_>, _>>()?;
        for &t in &inputs {
            tensors[t.0].producer = Producer::GraphInput;
        }

        let mut nodes = Vec::with_capacity(doc.nodes.len());
        let mut node_index = HashMap::with_capacity(doc.nodes.len());
        for nd in &doc.nodes {
            let id = NodeId(nodes.len());
            if node_index.insert(nd.id.clone(), id).is_some() {
                return Err(GraphError::DuplicateId {
                    kind: "node",
                    id: nd.id.clone(),
                });
            }
            let resolve = |role: &'static str, index: usize, name: &String| {
                tensor_index
                    .get(name)
                    .copied()
                    .ok_or_else(|| GraphError::DanglingTensor {
                        node: nd.id.clone(),
                        role,
                        index,
                        tensor: name.clone(),
                    })
            };
            let node_inputs = nd
                .inputs
                .iter()
                .enumerate()
                .map(|(i, s)| resolve("input", i, s))
                .collect::<Result<Vec<_>, _>>()?;
            let node_outputs = nd
                .outputs
                .iter()
                .enumerate()
                .map(|(i, s)| resolve("output", i, s))
                .collect::<Result<Vec<_>, _>>()?;
            for &t in &node_outputs {
                let td = &mut tensors[t.0];
                match td.producer {
                    Producer::Missing => td.producer = Producer::Node(id),
                    Producer::Node(prev) => {
                        return Err(GraphError::MultipleProducers {
                            tensor: td.name.clone(),
                            first: nodes
                                .get(prev.0)
                                .map(|n: &Node| n.name.clone())
                                .unwrap_or_else(|| nd.id.clone()),
                            second: nd.id.clone(),
                        })
                    }
                    Producer::GraphInput | Producer::Constant => {
                        return Err(GraphError::MultipleProducers {
                            tensor: td.name.clone(),
                            first: if td.constant {
                                "<constant>".into()
                            } else {
                                "<graph input>".into()
                            },
                            second: nd.id.clone(),
                        })
                    }
                }
            }
            for &t in &node_inputs {
                let consumers = &mut tensors[t.0].consumers;
                if consumers.last() != Some(&id) {
                    consumers.push(id);
                }
            }
            let (class, op_known) = OpClass::classify(&nd.op);
            if !op_known {
                log::warn!("node '{}': unknown op '{}' treated as Misc", nd.id, nd.op);
            }
            let mut devices: DeviceSet = nd.device_support.iter().copied().collect();
            if class != OpClass::Delegate {
                // CPU fallback is always available for ordinary operators.
                devices.cpu = true;
            }
            nodes.push(Node {
                name: nd.id.clone(),
                op: nd.op.clone(),
                class,
                op_known,
                inputs: node_inputs,
                outputs: node_outputs,
                attrs: nd.attrs.clone(),
                devices,
                control_flow: nd.control_flow,
            });
        }

        let mut is_output = vec![false; tensors.len()];
        for t in &outputs {
            is_output[t.0] = true;
        }
        Ok(Graph {
            tensors,
            nodes,
            inputs,
            outputs,
            is_output,
            tensor_index,
            node_index,
        })
    }

    pub fn to_doc(&self) -> GraphDoc {
        let names = |ids: &[TensorId]| -> Vec<String> {
            ids.iter().map(|t| self.tensors[t.0].name.clone()).collect()
        };
        GraphDoc {
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorDoc {
                    id: t.name.clone(),
                    dtype: Some(t.dtype),
                    shape: t
                        .shape
                        .as_ref()
                        .map(|s| s.0.iter().map(DimDoc::from_dim).collect()),
                    constant: t.constant,
                })
                .collect(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    id: n.name.clone(),
                    op: n.op.clone(),
                    inputs: names(&n.inputs),
                    outputs: names(&n.outputs),
                    attrs: n.attrs.clone(),
                    device_support: n.devices.to_vec(),
                    control_flow: n.control_flow,
                })
                .collect(),
            inputs: names(&self.inputs),
            outputs: names(&self.outputs),
        }
    }

    /// Canonical pretty-printed JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("graph documents always serialize")
    }
}
