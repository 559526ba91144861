//! Reference forward execution, im2col unrolling and FLOP accounting.
//!
//! Activations are `f32` NCHW. Every dot product accumulates in `f64` and is
//! rounded once, so results do not depend on how work is split across
//! threads.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{bias_key, infer_shapes, ConvAttrs, Graph, Op, PoolAttrs, TensorShape};
use crate::tensor::Matrix;

/// A feature map: NCHW `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub shape: TensorShape,
    pub data: Vec<f32>,
}

impl Activation {
    pub fn new(shape: TensorShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape {
                node: "activation".into(),
                reason: format!("{} values for shape {shape}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        let s = &self.shape;
        self.data[((b * s.c + c) * s.h + y) * s.w + x]
    }

    /// Channel vector at one spatial position.
    pub fn pixel(&self, b: usize, y: usize, x: usize) -> Vec<f32> {
        (0..self.shape.c).map(|c| self.at(b, c, y, x)).collect()
    }

    /// Stacks batch-1 activations of identical shape into one batch.
    pub fn stack(items: &[Activation]) -> Result<Activation> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape {
                node: "activation".into(),
                reason: "cannot stack zero activations".into(),
            })?
            .shape;
        let mut data = Vec::with_capacity(first.per_item() * items.len());
        let mut n = 0;
        for a in items {
            if a.shape.with_batch(first.n) != first {
                return Err(Error::Shape {
                    node: "activation".into(),
                    reason: format!("cannot stack {} with {}", a.shape, first),
                });
            }
            n += a.shape.n;
            data.extend_from_slice(&a.data);
        }
        Activation::new(first.with_batch(n), data)
    }

    /// Flattens to `n × (c·h·w)` rows for metric computations.
    pub fn to_matrix(&self) -> Matrix {
        let cols = self.shape.per_item();
        Matrix::new(
            self.shape.n,
            cols,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("finite activation")
    }
}

/// Runs the whole graph, returning the activations of `capture` plus the
/// Output node (keyed `"output"`-style by its id).
pub fn forward(g: &Graph, input: &Activation, capture: &[&str]) -> Result<BTreeMap<String, Activation>> {
    let mut wanted: Vec<&str> = capture.to_vec();
    wanted.push(g.output_node().id.as_str());
    run(g, input, &wanted)
}

/// Like [`forward`] but stops as soon as every captured node is computed;
/// the Output node is only included if requested.
pub fn forward_partial(
    g: &Graph,
    input: &Activation,
    capture: &[&str],
) -> Result<BTreeMap<String, Activation>> {
    run(g, input, capture)
}

fn run(g: &Graph, input: &Activation, capture: &[&str]) -> Result<BTreeMap<String, Activation>> {
    let expected = g.input_shape(input.shape.n);
    if input.shape != expected {
        return Err(Error::Shape {
            node: g.input_node().id.clone(),
            reason: format!("input {} does not match graph input {expected}", input.shape),
        });
    }
    for id in capture {
        g.node(id)?;
    }
    let wanted: HashSet<&str> = capture.iter().copied().collect();
    let mut remaining_uses: HashMap<&str, usize> = HashMap::new();
    for node in g.nodes() {
        for i in &node.inputs {
            *remaining_uses.entry(i.as_str()).or_default() += 1;
        }
    }

    let mut values: HashMap<&str, Activation> = HashMap::new();
    let mut out = BTreeMap::new();
    for node in g.nodes() {
        if out.len() == wanted.len() {
            break;
        }
        let id = node.id.as_str();
        let arg = |k: usize| &values[node.inputs[k].as_str()];
        let act = match &node.op {
            Op::Input { .. } => input.clone(),
            Op::Conv2d(a) => {
                let bias = if a.has_bias {
                    Some(&g.weight(&bias_key(id))?.data[..])
                } else {
                    None
                };
                conv2d(arg(0), a, &g.weight(id)?.data, bias)?
            }
            Op::Relu => {
                let x = arg(0);
                Activation {
                    shape: x.shape,
                    data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                }
            }
            Op::BatchNorm(bn) => {
                let x = arg(0);
                let p = &g.weight(id)?.data;
                let c = bn.channels;
                let plane = x.shape.h * x.shape.w;
                let mut data = x.data.clone();
                for (i, chunk) in data.chunks_mut(plane).enumerate() {
                    let ch = i % c;
                    let (gamma, beta, mean, var) =
                        (p[ch] as f64, p[c + ch] as f64, p[2 * c + ch] as f64, p[3 * c + ch] as f64);
                    let s = gamma / (var + bn.epsilon).sqrt();
                    for v in chunk {
                        *v = (s * (*v as f64 - mean) + beta) as f32;
                    }
                }
                Activation {
                    shape: x.shape,
                    data,
                }
            }
            Op::Add => {
                let (a, b) = (arg(0), arg(1));
                Activation {
                    shape: a.shape,
                    data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                }
            }
            Op::MaxPool(p) => pool(arg(0), p, true),
            Op::AvgPool(p) => pool(arg(0), p, false),
            Op::Dense(d) => {
                let x = arg(0);
                let w = &g.weight(id)?.data;
                let bias = if d.has_bias {
                    Some(&g.weight(&bias_key(id))?.data)
                } else {
                    None
                };
                let mut data = Vec::with_capacity(x.shape.n * d.out_features);
                for b in 0..x.shape.n {
                    let row = &x.data[b * d.in_features..(b + 1) * d.in_features];
                    for o in 0..d.out_features {
                        let wr = &w[o * d.in_features..(o + 1) * d.in_features];
                        let mut acc = bias.map_or(0.0, |bb| bb[o] as f64);
                        for (xi, wi) in row.iter().zip(wr) {
                            acc += *xi as f64 * *wi as f64;
                        }
                        data.push(acc as f32);
                    }
                }
                Activation {
                    shape: TensorShape::new(x.shape.n, d.out_features, 1, 1),
                    data,
                }
            }
            Op::ChannelSelect { kept } => {
                let x = arg(0);
                let plane = x.shape.h * x.shape.w;
                let mut data = Vec::with_capacity(x.shape.n * kept.len() * plane);
                for b in 0..x.shape.n {
                    for &k in kept {
                        let start = (b * x.shape.c + k) * plane;
                        data.extend_from_slice(&x.data[start..start + plane]);
                    }
                }
                Activation {
                    shape: TensorShape {
                        c: kept.len(),
                        ..x.shape
                    },
                    data,
                }
            }
            Op::Output => arg(0).clone(),
        };
        if act.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: id.to_string(),
            });
        }
        for i in &node.inputs {
            let uses = remaining_uses.get_mut(i.as_str()).expect("counted");
            *uses -= 1;
            if *uses == 0 {
                values.remove(i.as_str());
            }
        }
        if wanted.contains(id) {
            out.insert(id.to_string(), act.clone());
        }
        if remaining_uses.get(id).copied().unwrap_or(0) > 0 {
            values.insert(id, act);
        }
    }
    Ok(out)
}

/// Direct (loop-nest) convolution, grouped, zero-padded.
pub fn conv2d(x: &Activation, a: &ConvAttrs, w: &[f32], bias: Option<&[f32]>) -> Result<Activation> {
    let s = x.shape;
    if s.c != a.in_channels {
        return Err(Error::Shape {
            node: "conv2d".into(),
            reason: format!("expects {} channels, got {}", a.in_channels, s.c),
        });
    }
    let (oh, ow) = a
        .output_extent(s.h, s.w)
        .filter(|&(h, w)| h >= 1 && w >= 1)
        .ok_or_else(|| Error::Shape {
            node: "conv2d".into(),
            reason: format!("non-positive output extent for {s}"),
        })?;
    let out_shape = TensorShape::new(s.n, a.out_channels, oh, ow);
    let cin_g = a.in_channels / a.groups;
    let cout_g = a.out_channels / a.groups;
    let (kh, kw) = (a.kernel_h, a.kernel_w);
    let fan = a.fan_in();
    let mut data = vec![0f32; out_shape.numel()];
    data.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane_idx, plane)| {
            let b = plane_idx / a.out_channels;
            let o = plane_idx % a.out_channels;
            let grp = o / cout_g;
            let filt = &w[o * fan..(o + 1) * fan];
            let mut acc = vec![bias.map_or(0.0, |bb| bb[o] as f64); oh * ow];
            for ic in 0..cin_g {
                let c = grp * cin_g + ic;
                let xplane = &x.data[(b * s.c + c) * s.h * s.w..(b * s.c + c + 1) * s.h * s.w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = filt[(ic * kh + ky) * kw + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * a.stride + ky) as isize - a.padding as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * s.w..(iy as usize + 1) * s.w];
                            let arow = &mut acc[oy * ow..(oy + 1) * ow];
                            for (ox, av) in arow.iter_mut().enumerate() {
                                let ix = (ox * a.stride + kx) as isize - a.padding as isize;
                                if ix >= 0 && ix < s.w as isize {
                                    *av += wv * xrow[ix as usize] as f64;
                                }
                            }
                        }
                    }
                }
            }
            for (p, v) in plane.iter_mut().zip(acc) {
                *p = v as f32;
            }
        });
    Ok(Activation {
        shape: out_shape,
        data,
    })
}

fn pool(x: &Activation, p: &PoolAttrs, max: bool) -> Activation {
    let s = x.shape;
    let (oh, ow) = p.output_extent(s.h, s.w).expect("validated graph");
    let mut data = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in x.data.chunks(s.h * s.w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                for ky in 0..p.window {
                    for kx in 0..p.window {
                        let v = plane[(oy * p.stride + ky) * s.w + ox * p.stride + kx] as f64;
                        acc = if max { acc.max(v) } else { acc + v };
                    }
                }
                if !max {
                    acc /= (p.window * p.window) as f64;
                }
                data.push(acc as f32);
            }
        }
    }
    Activation {
        shape: TensorShape::new(s.n, s.c, oh, ow),
        data,
    }
}

/// Writes the receptive field of output position `(oy, ox)` of batch item
/// `b` into `row`. Columns are channel-major: block `i` of width `k_h·k_w`
/// belongs to input channel `i`. Padding contributes zeros.
pub fn im2col_row(x: &Activation, a: &ConvAttrs, b: usize, oy: usize, ox: usize, row: &mut [f64]) {
    let s = x.shape;
    let (kh, kw) = (a.kernel_h, a.kernel_w);
    debug_assert_eq!(row.len(), s.c * kh * kw);
    for c in 0..s.c {
        for ky in 0..kh {
            let iy = (oy * a.stride + ky) as isize - a.padding as isize;
            for kx in 0..kw {
                let ix = (ox * a.stride + kx) as isize - a.padding as isize;
                row[(c * kh + ky) * kw + kx] =
                    if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize {
                        x.at(b, c, iy as usize, ix as usize) as f64
                    } else {
                        0.0
                    };
            }
        }
    }
}

/// Unrolls `x` into one row per (batch item, output y, output x), in that
/// order, with `c·k_h·k_w` channel-major columns.
pub fn im2col(x: &Activation, a: &ConvAttrs) -> Result<Matrix> {
    let s = x.shape;
    let (oh, ow) = a
        .output_extent(s.h, s.w)
        .filter(|&(h, w)| h >= 1 && w >= 1)
        .ok_or_else(|| Error::Shape {
            node: "im2col".into(),
            reason: format!("non-positive output extent for {s}"),
        })?;
    let cols = s.c * a.kernel_area();
    let mut m = Matrix::zeros(s.n * oh * ow, cols);
    let mut r = 0;
    for b in 0..s.n {
        for oy in 0..oh {
            for ox in 0..ow {
                im2col_row(x, a, b, oy, ox, m.row_mut(r));
                r += 1;
            }
        }
    }
    Ok(m)
}

pub const FLOP_CONVENTION: &str =
    "1 multiply-accumulate = 2 FLOPs; ReLU/Add/pool/BatchNorm = 1 FLOP per output element";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub id: String,
    pub kind: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub convention: String,
    pub batch: usize,
    pub per_layer: Vec<LayerFlops>,
    pub total: u64,
}

impl FlopsReport {
    pub fn get(&self, id: &str) -> Option<u64> {
        self.per_layer.iter().find(|l| l.id == id).map(|l| l.flops)
    }

    /// Fixed-width text table, one row per layer, total last.
    pub fn to_table(&self) -> String {
        let mut s = format!("# {}\n", self.convention);
        s.push_str(&format!("{:<24} {:<14} {:>18} {:>8}\n", "layer", "kind", "flops", "share"));
        for l in &self.per_layer {
            let share = if self.total > 0 {
                100.0 * l.flops as f64 / self.total as f64
            } else {
                0.0
            };
            s.push_str(&format!("{:<24} {:<14} {:>18} {:>7.2}%\n", l.id, l.kind, l.flops, share));
        }
        s.push_str(&format!("{:<24} {:<14} {:>18}\n", "total", "", self.total));
        s
    }
}

/// FLOPs of every compute node for an input of the given shape.
pub fn count_flops(g: &Graph, input: TensorShape) -> Result<FlopsReport> {
    let shapes = infer_shapes(g, input)?;
    let mut per_layer = Vec::new();
    for node in g.nodes() {
        let out = shapes[&node.id];
        let elems = out.numel() as u64;
        let flops = match &node.op {
            Op::Input { .. } | Op::Output => continue,
            Op::Conv2d(a) => {
                2 * (a.out_channels * a.fan_in() * out.h * out.w * out.n) as u64
            }
            Op::Dense(d) => 2 * (d.in_features * d.out_features * out.n) as u64,
            Op::Relu | Op::Add | Op::MaxPool(_) | Op::AvgPool(_) | Op::BatchNorm(_) => elems,
            Op::ChannelSelect { .. } => 0,
        };
        per_layer.push(LayerFlops {
            id: node.id.clone(),
            kind: node.op.kind_name().to_string(),
            flops,
        });
    }
    let total = per_layer.iter().map(|l| l.flops).sum();
    Ok(FlopsReport {
        convention: FLOP_CONVENTION.to_string(),
        batch: input.n,
        per_layer,
        total,
    })
}

/// `orig.total / pruned.total`.
pub fn speedup_ratio(orig: &FlopsReport, pruned: &FlopsReport) -> Result<f64> {
    if orig.total == 0 || pruned.total == 0 {
        return Err(Error::Config(
            "speed-up needs non-zero FLOP totals on both sides".into(),
        ));
    }
    Ok(orig.total as f64 / pruned.total as f64)
}
