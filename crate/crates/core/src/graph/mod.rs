//! Compute-graph model: typed layer nodes, an `f32` weight store, validation,
//! shape inference, (de)serialization and the pruning rewrites.
//!
//! A [`Graph`] is immutable once built. Every rewrite returns a fresh,
//! re-validated graph.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

mod builder;
mod io;
mod rewrite;
mod shape;

pub use builder::GraphBuilder;
pub use io::{load_graph, load_weights, read_graph_file, save_graph, write_weights, WEIGHT_MAGIC};
pub use rewrite::{
    apply_channel_prune, fold_batchnorm, insert_channel_select, removable_producer,
    with_layer_params, RemovalPath,
};
pub use shape::infer_shapes;
pub(crate) use io::{read_file as io_read, Cursor as BlobCursor};

/// Batch × channels × height × width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl TensorShape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn per_item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn with_batch(self, n: usize) -> Self {
        Self { n, ..self }
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl std::str::FromStr for TensorShape {
    type Err = Error;

    /// Parses `NxCxHxW`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
        if parts.len() != 4 {
            return Err(Error::Parse(format!("shape `{s}` is not NxCxHxW")));
        }
        let mut dims = [0usize; 4];
        for (d, p) in dims.iter_mut().zip(&parts) {
            *d = p
                .parse()
                .map_err(|_| Error::Parse(format!("shape `{s}` has a non-integer extent")))?;
            if *d == 0 {
                return Err(Error::Parse(format!("shape `{s}` has a zero extent")));
            }
        }
        Ok(TensorShape::new(dims[0], dims[1], dims[2], dims[3]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvAttrs {
    /// Columns of one group's im2col row: `c/groups · k_h · k_w`.
    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel_h * self.kernel_w
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = (h + 2 * self.padding).checked_sub(self.kernel_h)? / self.stride + 1;
        let ow = (w + 2 * self.padding).checked_sub(self.kernel_w)? / self.stride + 1;
        Some((oh, ow))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolAttrs {
    pub window: usize,
    pub stride: usize,
}

impl PoolAttrs {
    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = h.checked_sub(self.window)? / self.stride + 1;
        let ow = w.checked_sub(self.window)? / self.stride + 1;
        Some((oh, ow))
    }
}

/// Batch-norm attributes. The per-channel γ, β, μ, σ² live in the weight
/// store as a `[4, channels]` tensor, rows in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormAttrs {
    pub channels: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseAttrs {
    pub in_features: usize,
    pub out_features: usize,
    pub has_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Op {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    #[serde(rename = "Conv2D")]
    Conv2d(ConvAttrs),
    #[serde(rename = "ReLU")]
    Relu,
    BatchNorm(BatchNormAttrs),
    Add,
    MaxPool(PoolAttrs),
    AvgPool(PoolAttrs),
    Dense(DenseAttrs),
    ChannelSelect {
        kept: Vec<usize>,
    },
    Output,
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "Input",
            Op::Conv2d(_) => "Conv2D",
            Op::Relu => "ReLU",
            Op::BatchNorm(_) => "BatchNorm",
            Op::Add => "Add",
            Op::MaxPool(_) => "MaxPool",
            Op::AvgPool(_) => "AvgPool",
            Op::Dense(_) => "Dense",
            Op::ChannelSelect { .. } => "ChannelSelect",
            Op::Output => "Output",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input { .. } => 0,
            Op::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: Op,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, inputs: Vec<String>, op: Op) -> Self {
        Self {
            id: id.into(),
            inputs,
            op,
        }
    }

    pub fn conv(&self) -> Option<&ConvAttrs> {
        match &self.op {
            Op::Conv2d(a) => Some(a),
            _ => None,
        }
    }
}

/// A stored weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub fn bias_key(id: &str) -> String {
    format!("{id}.bias")
}

/// A validated compute graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: BTreeMap<String, LayerNode>,
    topo_order: Vec<String>,
    weights: BTreeMap<String, Tensor>,
}

fn node_map(nodes: Vec<LayerNode>) -> Result<BTreeMap<String, LayerNode>> {
    let mut map = BTreeMap::new();
    for node in nodes {
        if node.id.ends_with(".bias") {
            return Err(Error::InvalidGraph(format!(
                "node id `{}` clashes with bias key naming",
                node.id
            )));
        }
        if let Some(prev) = map.insert(node.id.clone(), node) {
            return Err(Error::InvalidGraph(format!("duplicate node id `{}`", prev.id)));
        }
    }
    Ok(map)
}

impl Graph {
    /// Assembles and validates a graph.
    pub fn new(
        nodes: Vec<LayerNode>,
        topo_order: Vec<String>,
        weights: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let g = Graph {
            nodes: node_map(nodes)?,
            topo_order,
            weights,
        };
        g.validate()?;
        Ok(g)
    }

    /// Validates structure and shapes only. The result carries no weights,
    /// so it suits FLOP counting and shape queries but not inference.
    pub fn without_weights(nodes: Vec<LayerNode>, topo_order: Vec<String>) -> Result<Self> {
        let g = Graph {
            nodes: node_map(nodes)?,
            topo_order,
            weights: BTreeMap::new(),
        };
        g.validate_structure()?;
        infer_shapes(&g, g.input_shape(1))?;
        Ok(g)
    }

    /// Weightless copy for what-if FLOP accounting. Not validated; only
    /// structural queries and shape inference are meaningful on it.
    pub(crate) fn skeleton(&self) -> Self {
        Graph {
            nodes: self.nodes.clone(),
            topo_order: self.topo_order.clone(),
            weights: BTreeMap::new(),
        }
    }

    pub(crate) fn from_parts_unchecked(
        nodes: BTreeMap<String, LayerNode>,
        topo_order: Vec<String>,
    ) -> Self {
        Graph {
            nodes,
            topo_order,
            weights: BTreeMap::new(),
        }
    }

    pub(crate) fn into_parts(
        self,
    ) -> (
        BTreeMap<String, LayerNode>,
        Vec<String>,
        BTreeMap<String, Tensor>,
    ) {
        (self.nodes, self.topo_order, self.weights)
    }

    pub(crate) fn from_parts_checked(
        nodes: BTreeMap<String, LayerNode>,
        topo_order: Vec<String>,
        weights: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let g = Graph {
            nodes,
            topo_order,
            weights,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &LayerNode> {
        self.topo_order.iter().map(|id| &self.nodes[id])
    }

    pub fn node(&self, id: &str) -> Result<&LayerNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn topo_order(&self) -> &[String] {
        &self.topo_order
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, key: &str) -> Result<&Tensor> {
        self.weights
            .get(key)
            .ok_or_else(|| Error::InvalidGraph(format!("missing weight `{key}`")))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_node(&self) -> &LayerNode {
        self.nodes()
            .find(|n| matches!(n.op, Op::Input { .. }))
            .expect("validated graph has an Input node")
    }

    pub fn output_node(&self) -> &LayerNode {
        self.nodes()
            .find(|n| matches!(n.op, Op::Output))
            .expect("validated graph has an Output node")
    }

    /// Per-item input shape declared by the Input node, with batch `n`.
    pub fn input_shape(&self, n: usize) -> TensorShape {
        match self.input_node().op {
            Op::Input {
                channels,
                height,
                width,
            } => TensorShape::new(n, channels, height, width),
            _ => unreachable!(),
        }
    }

    /// Consumers of each node, listed in topological order.
    pub fn consumers(&self) -> HashMap<&str, Vec<&str>> {
        let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
        for node in self.nodes() {
            for input in &node.inputs {
                out.entry(input.as_str()).or_default().push(node.id.as_str());
            }
        }
        out
    }

    pub fn consumers_of(&self, id: &str) -> Vec<&str> {
        self.nodes()
            .filter(|n| n.inputs.iter().any(|i| i == id))
            .map(|n| n.id.as_str())
            .collect()
    }

    pub fn conv_attrs(&self, id: &str) -> Result<&ConvAttrs> {
        self.node(id)?.conv().ok_or_else(|| Error::Unsupported {
            node: id.to_string(),
            reason: "not a Conv2D".into(),
        })
    }

    /// Conv weights as an `n × (c/groups·k_h·k_w)` matrix.
    pub fn conv_weight_matrix(&self, id: &str) -> Result<Matrix> {
        let attrs = self.conv_attrs(id)?;
        let w = self.weight(id)?;
        Ok(Matrix::new(
            attrs.out_channels,
            attrs.fan_in(),
            w.data.iter().map(|&v| v as f64).collect(),
        )?)
    }

    /// Conv bias as `f64`, zeros when the layer has none.
    pub fn conv_bias(&self, id: &str) -> Result<Vec<f64>> {
        let attrs = self.conv_attrs(id)?;
        if attrs.has_bias {
            Ok(self
                .weight(&bias_key(id))?
                .data
                .iter()
                .map(|&v| v as f64)
                .collect())
        } else {
            Ok(vec![0.0; attrs.out_channels])
        }
    }

    /// Weight-store keys in serialization order: per node in topo order,
    /// the main tensor then its bias.
    pub fn weight_keys(&self) -> Vec<String> {
        let mut keys = Vec::new();
        for node in self.nodes() {
            if self.weights.contains_key(&node.id) {
                keys.push(node.id.clone());
            }
            let b = bias_key(&node.id);
            if self.weights.contains_key(&b) {
                keys.push(b);
            }
        }
        keys
    }

    fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        self.validate_weights()?;
        let input = self.input_shape(1);
        infer_shapes(self, input)?;
        Ok(())
    }

    pub(crate) fn validate_structure(&self) -> Result<()> {
        if self.topo_order.len() != self.nodes.len() {
            return Err(Error::InvalidGraph(format!(
                "topo_order lists {} ids for {} nodes",
                self.topo_order.len(),
                self.nodes.len()
            )));
        }
        let mut inputs = 0;
        let mut outputs = 0;
        for node in self.nodes.values() {
            for i in &node.inputs {
                if !self.nodes.contains_key(i) {
                    return Err(Error::DanglingInput {
                        node: node.id.clone(),
                        input: i.clone(),
                    });
                }
            }
            if node.inputs.len() != node.op.arity() {
                return Err(Error::InvalidGraph(format!(
                    "{} node `{}` takes {} inputs, has {}",
                    node.op.kind_name(),
                    node.id,
                    node.op.arity(),
                    node.inputs.len()
                )));
            }
            match &node.op {
                Op::Input { .. } => inputs += 1,
                Op::Output => outputs += 1,
                Op::Conv2d(a) => {
                    if a.groups == 0
                        || a.stride == 0
                        || a.kernel_h == 0
                        || a.kernel_w == 0
                        || a.in_channels % a.groups != 0
                        || a.out_channels % a.groups != 0
                    {
                        return Err(Error::InvalidGraph(format!(
                            "conv `{}` has inconsistent attributes",
                            node.id
                        )));
                    }
                }
                Op::MaxPool(p) | Op::AvgPool(p) if p.window == 0 || p.stride == 0 => {
                    return Err(Error::InvalidGraph(format!(
                        "pool `{}` has zero window or stride",
                        node.id
                    )));
                }
                Op::ChannelSelect { kept } => {
                    if kept.is_empty() || kept.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::BadIndices(format!(
                            "`{}` indices must be non-empty and strictly increasing",
                            node.id
                        )));
                    }
                }
                Op::BatchNorm(bn) if !(bn.epsilon > 0.0) => {
                    return Err(Error::InvalidGraph(format!(
                        "batch norm `{}` has epsilon {} <= 0",
                        node.id, bn.epsilon
                    )));
                }
                _ => {}
            }
        }
        if inputs != 1 || outputs != 1 {
            return Err(Error::InvalidGraph(format!(
                "expected one Input and one Output, found {inputs} and {outputs}"
            )));
        }

        if let Some(id) = self.find_cycle() {
            return Err(Error::Cycle(id));
        }

        // topo_order must be a permutation where every input precedes its user.
        let mut seen = HashSet::new();
        for id in &self.topo_order {
            let node = self
                .nodes
                .get(id)
                .ok_or_else(|| Error::UnknownNode(id.clone()))?;
            if let Some(i) = node.inputs.iter().find(|i| !seen.contains(i.as_str())) {
                return Err(Error::InvalidGraph(format!(
                    "topo_order places `{id}` before its input `{i}`"
                )));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidGraph(format!("`{id}` repeated in topo_order")));
            }
        }
        Ok(())
    }

    /// Kahn's algorithm; returns a node left on a cycle, if any.
    fn find_cycle(&self) -> Option<String> {
        let mut indegree: HashMap<&str, usize> =
            self.nodes.values().map(|n| (n.id.as_str(), n.inputs.len())).collect();
        let mut users: HashMap<&str, Vec<&str>> = HashMap::new();
        for n in self.nodes.values() {
            for i in &n.inputs {
                users.entry(i.as_str()).or_default().push(n.id.as_str());
            }
        }
        let mut ready: Vec<&str> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut done = 0;
        while let Some(id) = ready.pop() {
            done += 1;
            for &u in users.get(id).into_iter().flatten() {
                let d = indegree.get_mut(u).expect("known node");
                *d -= 1;
                if *d == 0 {
                    ready.push(u);
                }
            }
        }
        if done == self.nodes.len() {
            return None;
        }
        indegree
            .into_iter()
            .filter(|(_, d)| *d > 0)
            .map(|(id, _)| id.to_string())
            .min()
    }

    fn validate_weights(&self) -> Result<()> {
        let mut expected: BTreeMap<String, usize> = BTreeMap::new();
        for node in self.nodes.values() {
            match &node.op {
                Op::Conv2d(a) => {
                    expected.insert(node.id.clone(), a.weight_len());
                    if a.has_bias {
                        expected.insert(bias_key(&node.id), a.out_channels);
                    }
                }
                Op::Dense(d) => {
                    expected.insert(node.id.clone(), d.in_features * d.out_features);
                    if d.has_bias {
                        expected.insert(bias_key(&node.id), d.out_features);
                    }
                }
                Op::BatchNorm(bn) => {
                    expected.insert(node.id.clone(), 4 * bn.channels);
                }
                _ => {}
            }
        }
        for (key, &len) in &expected {
            let t = self
                .weights
                .get(key)
                .ok_or_else(|| Error::InvalidGraph(format!("missing weight `{key}`")))?;
            if t.numel() != len || t.dims.iter().product::<usize>() != t.numel() {
                return Err(Error::WeightSize {
                    key: key.clone(),
                    expected: len,
                    actual: t.numel(),
                });
            }
            if let Some(bad) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidGraph(format!(
                    "weight `{key}` has a non-finite entry at {bad}"
                )));
            }
        }
        if let Some(extra) = self.weights.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::InvalidGraph(format!("unexpected weight `{extra}`")));
        }
        Ok(())
    }
}
