use std::collections::BTreeMap;

use super::{bias_key, ConvAttrs, Graph, LayerNode, Op, Tensor};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Merges every BatchNorm into the Conv2D feeding it:
/// `W'ⱼ = sⱼ·Wⱼ`, `b'ⱼ = sⱼ·(bⱼ − μⱼ) + βⱼ` with `sⱼ = γⱼ/√(σ²ⱼ + ε)`.
///
/// Afterwards every Conv2D and Dense layer carries an explicit bias
/// (zero-filled where there was none).
pub fn fold_batchnorm(g: &Graph) -> Result<Graph> {
    let consumers = g.consumers();
    let mut folds: BTreeMap<String, String> = BTreeMap::new(); // bn -> conv
    for node in g.nodes() {
        let Op::BatchNorm(bn) = &node.op else { continue };
        if !(bn.epsilon > 0.0) {
            return Err(Error::InvalidGraph(format!(
                "batch norm `{}` has epsilon {} <= 0",
                node.id, bn.epsilon
            )));
        }
        let src = &node.inputs[0];
        if g.node(src)?.conv().is_none() {
            return Err(Error::Unsupported {
                node: node.id.clone(),
                reason: format!("BatchNorm must follow a Conv2D, found `{src}`"),
            });
        }
        if consumers[src.as_str()].len() != 1 {
            return Err(Error::Unsupported {
                node: node.id.clone(),
                reason: format!("conv `{src}` feeds other nodes besides the BatchNorm"),
            });
        }
        folds.insert(node.id.clone(), src.clone());
    }

    let (mut nodes, topo, mut weights) = g.clone().into_parts();
    for (bn_id, conv_id) in &folds {
        let Op::BatchNorm(bn) = &nodes[bn_id].op else { unreachable!() };
        let eps = bn.epsilon;
        let params = weights.remove(bn_id).expect("validated BN weight");
        let c = params.numel() / 4;
        let p = |row: usize, j: usize| params.data[row * c + j] as f64;

        let attrs = nodes[conv_id].conv().expect("checked above").clone();
        let fan_in = attrs.fan_in();
        let bias = g.conv_bias(conv_id)?;
        let w = weights.get_mut(conv_id).expect("validated conv weight");
        let mut new_bias = vec![0f32; c];
        for j in 0..c {
            let (gamma, beta, mean, var) = (p(0, j), p(1, j), p(2, j), p(3, j));
            let s = gamma / (var + eps).sqrt();
            for v in &mut w.data[j * fan_in..(j + 1) * fan_in] {
                *v = (s * *v as f64) as f32;
            }
            new_bias[j] = (s * (bias[j] - mean) + beta) as f32;
        }
        weights.insert(bias_key(conv_id), Tensor::new(vec![c], new_bias));
        if let Op::Conv2d(a) = &mut nodes.get_mut(conv_id).expect("exists").op {
            a.has_bias = true;
        }
    }

    // Rewire users of each BN to its conv, then drop the BN nodes.
    for node in nodes.values_mut() {
        for input in &mut node.inputs {
            if let Some(conv) = folds.get(input) {
                *input = conv.clone();
            }
        }
    }
    for bn in folds.keys() {
        nodes.remove(bn);
    }
    let topo: Vec<String> = topo.into_iter().filter(|id| !folds.contains_key(id)).collect();

    for node in nodes.values_mut() {
        match &mut node.op {
            Op::Conv2d(a) if !a.has_bias => {
                a.has_bias = true;
                weights.insert(bias_key(&node.id), Tensor::zeros(vec![a.out_channels]));
            }
            Op::Dense(d) if !d.has_bias => {
                d.has_bias = true;
                weights.insert(bias_key(&node.id), Tensor::zeros(vec![d.out_features]));
            }
            _ => {}
        }
    }
    Graph::from_parts_checked(nodes, topo, weights)
}

/// Where the input channels of a conv come from when they can be physically
/// removed: a single-consumer producer conv, reached through channel-wise
/// nodes (ReLU, pools) that have no other consumers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemovalPath {
    pub producer: String,
    pub through: Vec<String>,
}

/// Finds the producer conv whose output filters can be deleted together with
/// `consumer`'s input channels, or explains why that is not possible.
pub fn removable_producer(g: &Graph, consumer: &str) -> Result<RemovalPath> {
    let blocked = |reason: String| Error::ProducerNotRemovable {
        consumer: consumer.to_string(),
        reason,
    };
    let attrs = g.conv_attrs(consumer)?;
    if attrs.groups != 1 {
        return Err(Error::Unsupported {
            node: consumer.to_string(),
            reason: "grouped convolution cannot be pruned".into(),
        });
    }
    let consumers = g.consumers();
    let mut through = Vec::new();
    let mut cur = g.node(consumer)?.inputs[0].clone();
    loop {
        let node = g.node(&cur)?;
        if consumers[cur.as_str()].len() != 1 {
            return Err(blocked(format!("`{cur}` feeds several consumers")));
        }
        match &node.op {
            Op::Relu | Op::MaxPool(_) | Op::AvgPool(_) => {
                through.push(cur.clone());
                cur = node.inputs[0].clone();
            }
            Op::Conv2d(a) if a.groups == 1 => {
                return Ok(RemovalPath {
                    producer: cur,
                    through,
                })
            }
            other => {
                return Err(blocked(format!(
                    "producer `{cur}` is a {}",
                    if matches!(other, Op::Conv2d(_)) {
                        "grouped Conv2D"
                    } else {
                        other.kind_name()
                    }
                )))
            }
        }
    }
}

fn check_kept(kept: &[usize], limit: usize) -> Result<()> {
    if kept.is_empty() {
        return Err(Error::BadIndices("kept set is empty".into()));
    }
    if kept.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::BadIndices(format!(
            "indices {kept:?} are not strictly increasing"
        )));
    }
    if let Some(&bad) = kept.iter().find(|&&k| k >= limit) {
        return Err(Error::BadIndices(format!("index {bad} out of range 0..{limit}")));
    }
    Ok(())
}

fn to_f32(m: &Matrix) -> Vec<f32> {
    m.as_slice().iter().map(|&v| v as f32).collect()
}

/// Keeps only the input-channel blocks of `w` listed in `kept`.
fn slice_input_blocks(w: &[f32], attrs: &ConvAttrs, kept: &[usize]) -> Vec<f32> {
    let area = attrs.kernel_area();
    let fan_in = attrs.fan_in();
    let mut out = Vec::with_capacity(attrs.out_channels * kept.len() * area);
    for o in 0..attrs.out_channels {
        let filt = &w[o * fan_in..(o + 1) * fan_in];
        for &k in kept {
            out.extend_from_slice(&filt[k * area..(k + 1) * area]);
        }
    }
    out
}

fn set_conv(
    nodes: &mut BTreeMap<String, LayerNode>,
    weights: &mut BTreeMap<String, Tensor>,
    id: &str,
    attrs: ConvAttrs,
    w: Vec<f32>,
    bias: Option<Vec<f32>>,
) {
    weights.insert(
        id.to_string(),
        Tensor::new(
            vec![
                attrs.out_channels,
                attrs.in_channels / attrs.groups,
                attrs.kernel_h,
                attrs.kernel_w,
            ],
            w,
        ),
    );
    let mut attrs = attrs;
    if let Some(b) = bias {
        attrs.has_bias = true;
        weights.insert(bias_key(id), Tensor::new(vec![b.len()], b));
    }
    nodes.get_mut(id).expect("known conv").op = Op::Conv2d(attrs);
}

fn check_weight_shape(id: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Shape {
            node: id.to_string(),
            reason: format!("new weights are {:?}, expected ({rows}, {cols})", m.shape()),
        });
    }
    Ok(())
}

/// Removes input channels of `conv_id` (keeping `kept`) together with the
/// matching output filters of its producer, and installs `new_weights`
/// (`n × |kept|·k_h·k_w`) plus an optional new bias on `conv_id`.
pub fn apply_channel_prune(
    g: &Graph,
    conv_id: &str,
    kept: &[usize],
    new_weights: &Matrix,
    new_bias: Option<&[f64]>,
) -> Result<Graph> {
    let attrs = g.conv_attrs(conv_id)?.clone();
    check_kept(kept, attrs.in_channels)?;
    let path = removable_producer(g, conv_id)?;
    check_weight_shape(
        conv_id,
        new_weights,
        attrs.out_channels,
        kept.len() * attrs.kernel_area(),
    )?;

    let (mut nodes, topo, mut weights) = g.clone().into_parts();

    let pattrs = g.conv_attrs(&path.producer)?.clone();
    let pw = &g.weight(&path.producer)?.data;
    let fan = pattrs.fan_in();
    let mut new_pw = Vec::with_capacity(kept.len() * fan);
    for &k in kept {
        new_pw.extend_from_slice(&pw[k * fan..(k + 1) * fan]);
    }
    let new_pb = if pattrs.has_bias {
        let pb = &g.weight(&bias_key(&path.producer))?.data;
        Some(kept.iter().map(|&k| pb[k]).collect())
    } else {
        None
    };
    let pattrs = ConvAttrs {
        out_channels: kept.len(),
        ..pattrs
    };
    set_conv(&mut nodes, &mut weights, &path.producer, pattrs, new_pw, new_pb);

    let cattrs = ConvAttrs {
        in_channels: kept.len(),
        ..attrs
    };
    let bias = new_bias.map(|b| b.iter().map(|&v| v as f32).collect());
    set_conv(&mut nodes, &mut weights, conv_id, cattrs, to_f32(new_weights), bias);

    Graph::from_parts_checked(nodes, topo, weights)
}

/// Splices a ChannelSelect onto the single edge `producer → consumer`.
///
/// When the consumer is a Conv2D its weights are sliced to the kept input
/// channels, so the result is valid immediately; callers install
/// reconstructed weights afterwards with [`with_layer_params`].
pub fn insert_channel_select(
    g: &Graph,
    producer: &str,
    consumer: &str,
    kept: &[usize],
) -> Result<Graph> {
    let cnode = g.node(consumer)?;
    if !cnode.inputs.iter().any(|i| i == producer) {
        return Err(Error::InvalidGraph(format!(
            "edge `{producer}` -> `{consumer}` not found"
        )));
    }
    let channels = super::infer_shapes(g, g.input_shape(1))?[producer].c;
    check_kept(kept, channels)?;

    let mut select_id = format!("{consumer}_select");
    let mut n = 1;
    while g.contains(&select_id) {
        n += 1;
        select_id = format!("{consumer}_select{n}");
    }

    let (mut nodes, mut topo, mut weights) = g.clone().into_parts();
    for input in &mut nodes.get_mut(consumer).expect("exists").inputs {
        if input == producer {
            *input = select_id.clone();
        }
    }
    nodes.insert(
        select_id.clone(),
        LayerNode::new(
            select_id.clone(),
            vec![producer.to_string()],
            Op::ChannelSelect {
                kept: kept.to_vec(),
            },
        ),
    );
    let pos = topo.iter().position(|id| id == consumer).expect("in topo order");
    topo.insert(pos, select_id);

    if let Some(attrs) = cnode.conv() {
        if attrs.groups != 1 {
            return Err(Error::Unsupported {
                node: consumer.to_string(),
                reason: "grouped convolution cannot be pruned".into(),
            });
        }
        let w = slice_input_blocks(&g.weight(consumer)?.data, attrs, kept);
        let cattrs = ConvAttrs {
            in_channels: kept.len(),
            ..attrs.clone()
        };
        set_conv(&mut nodes, &mut weights, consumer, cattrs, w, None);
    }
    Graph::from_parts_checked(nodes, topo, weights)
}

/// Replaces a conv's weights (same shape) and optionally its bias.
pub fn with_layer_params(
    g: &Graph,
    conv_id: &str,
    weights: &Matrix,
    bias: Option<&[f64]>,
) -> Result<Graph> {
    let attrs = g.conv_attrs(conv_id)?.clone();
    check_weight_shape(conv_id, weights, attrs.out_channels, attrs.fan_in())?;
    if let Some(b) = bias {
        if b.len() != attrs.out_channels {
            return Err(Error::Shape {
                node: conv_id.to_string(),
                reason: format!("bias has {} entries, expected {}", b.len(), attrs.out_channels),
            });
        }
    }
    let (mut nodes, topo, mut store) = g.clone().into_parts();
    let bias = bias.map(|b| b.iter().map(|&v| v as f32).collect());
    set_conv(&mut nodes, &mut store, conv_id, attrs, to_f32(weights), bias);
    Graph::from_parts_checked(nodes, topo, store)
}
