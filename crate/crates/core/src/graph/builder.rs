use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    bias_key, BatchNormAttrs, ConvAttrs, DenseAttrs, Graph, LayerNode, Op, PoolAttrs, Tensor,
};
use crate::error::Result;

/// Incremental, seeded graph construction with He-style random weights.
///
/// Node ids are chosen by the caller; every method returns the id it added
/// so calls chain naturally. The Input node is always `"input"` and the
/// Output node `"output"`.
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    weights: BTreeMap<String, Tensor>,
    // (channels, height, width) per node, tracked to size new layers.
    dims: BTreeMap<String, (usize, usize, usize)>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut b = Self {
            nodes: Vec::new(),
            weights: BTreeMap::new(),
            dims: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.push(
            "input",
            vec![],
            Op::Input {
                channels,
                height,
                width,
            },
            (channels, height, width),
        );
        b
    }

    fn push(&mut self, id: &str, inputs: Vec<String>, op: Op, dims: (usize, usize, usize)) -> String {
        self.nodes.push(LayerNode::new(id, inputs, op));
        self.dims.insert(id.to_string(), dims);
        id.to_string()
    }

    fn dims_of(&self, id: &str) -> (usize, usize, usize) {
        *self
            .dims
            .get(id)
            .unwrap_or_else(|| panic!("GraphBuilder: unknown node `{id}`"))
    }

    /// Channel count of an existing node's output.
    pub fn channels_of(&self, id: &str) -> usize {
        self.dims_of(id).0
    }

    fn gaussian(&mut self, len: usize, std: f64) -> Vec<f32> {
        let normal = Normal::new(0.0, std).expect("finite std");
        (0..len).map(|_| normal.sample(&mut self.rng) as f32).collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Ungrouped convolution with bias.
    pub fn conv(
        &mut self,
        id: &str,
        from: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> String {
        self.conv_grouped(id, from, out_channels, kernel, stride, padding, 1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_grouped(
        &mut self,
        id: &str,
        from: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> String {
        let (c, h, w) = self.dims_of(from);
        let attrs = ConvAttrs {
            out_channels,
            in_channels: c,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            groups,
            has_bias: true,
        };
        let (oh, ow) = attrs.output_extent(h, w).unwrap_or((0, 0));
        let std = (2.0 / attrs.fan_in().max(1) as f64).sqrt();
        let weight = self.gaussian(attrs.weight_len(), std);
        let bias = self.gaussian(out_channels, 0.1);
        self.weights.insert(
            id.to_string(),
            Tensor::new(vec![out_channels, c / groups.max(1), kernel, kernel], weight),
        );
        self.weights
            .insert(bias_key(id), Tensor::new(vec![out_channels], bias));
        self.push(id, vec![from.into()], Op::Conv2d(attrs), (out_channels, oh, ow))
    }

    pub fn relu(&mut self, id: &str, from: &str) -> String {
        let d = self.dims_of(from);
        self.push(id, vec![from.into()], Op::Relu, d)
    }

    /// Batch norm with random but well-conditioned statistics.
    pub fn batchnorm(&mut self, id: &str, from: &str) -> String {
        let d = self.dims_of(from);
        let c = d.0;
        let mut params = Vec::with_capacity(4 * c);
        params.extend((0..c).map(|_| self.rng.gen_range(0.5f32..1.5)));
        params.extend(self.gaussian(c, 0.1));
        params.extend(self.gaussian(c, 0.5));
        params.extend((0..c).map(|_| self.rng.gen_range(0.5f32..2.0)));
        self.weights
            .insert(id.to_string(), Tensor::new(vec![4, c], params));
        self.push(
            id,
            vec![from.into()],
            Op::BatchNorm(BatchNormAttrs {
                channels: c,
                epsilon: 1e-5,
            }),
            d,
        )
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> String {
        let d = self.dims_of(a);
        self.push(id, vec![a.into(), b.into()], Op::Add, d)
    }

    pub fn maxpool(&mut self, id: &str, from: &str, window: usize, stride: usize) -> String {
        self.pool(id, from, window, stride, true)
    }

    pub fn avgpool(&mut self, id: &str, from: &str, window: usize, stride: usize) -> String {
        self.pool(id, from, window, stride, false)
    }

    fn pool(&mut self, id: &str, from: &str, window: usize, stride: usize, max: bool) -> String {
        let (c, h, w) = self.dims_of(from);
        let attrs = PoolAttrs { window, stride };
        let (oh, ow) = attrs.output_extent(h, w).unwrap_or((0, 0));
        let op = if max {
            Op::MaxPool(attrs)
        } else {
            Op::AvgPool(attrs)
        };
        self.push(id, vec![from.into()], op, (c, oh, ow))
    }

    pub fn dense(&mut self, id: &str, from: &str, out_features: usize) -> String {
        let (c, h, w) = self.dims_of(from);
        let in_features = c * h * w;
        let weight = self.gaussian(in_features * out_features, (1.0 / in_features as f64).sqrt());
        let bias = self.gaussian(out_features, 0.1);
        self.weights.insert(
            id.to_string(),
            Tensor::new(vec![out_features, in_features], weight),
        );
        self.weights
            .insert(bias_key(id), Tensor::new(vec![out_features], bias));
        self.push(
            id,
            vec![from.into()],
            Op::Dense(DenseAttrs {
                in_features,
                out_features,
                has_bias: true,
            }),
            (out_features, 1, 1),
        )
    }

    pub fn channel_select(&mut self, id: &str, from: &str, kept: Vec<usize>) -> String {
        let (_, h, w) = self.dims_of(from);
        let c = kept.len();
        self.push(id, vec![from.into()], Op::ChannelSelect { kept }, (c, h, w))
    }

    pub fn output(&mut self, from: &str) -> String {
        let d = self.dims_of(from);
        self.push("output", vec![from.into()], Op::Output, d)
    }

    /// Direct access to a weight tensor, for tests that need specific values.
    pub fn weight_mut(&mut self, key: &str) -> &mut Tensor {
        self.weights
            .get_mut(key)
            .unwrap_or_else(|| panic!("GraphBuilder: no weight `{key}`"))
    }

    /// Drops a conv's bias tensor and marks the layer bias-free.
    pub fn remove_bias(&mut self, id: &str) {
        self.weights.remove(&bias_key(id));
        for n in &mut self.nodes {
            if n.id == id {
                if let Op::Conv2d(a) = &mut n.op {
                    a.has_bias = false;
                }
            }
        }
    }

    /// Nodes are topologically ordered by insertion.
    pub fn build(self) -> Result<Graph> {
        let order = self.nodes.iter().map(|n| n.id.clone()).collect();
        Graph::new(self.nodes, order, self.weights)
    }
}
