use std::collections::BTreeMap;

use super::{Graph, Op, TensorShape};
use crate::error::{Error, Result};

fn shape_err(node: &str, reason: impl Into<String>) -> Error {
    Error::Shape {
        node: node.to_string(),
        reason: reason.into(),
    }
}

/// Output shape of every node for the given input.
pub fn infer_shapes(g: &Graph, input: TensorShape) -> Result<BTreeMap<String, TensorShape>> {
    let mut shapes: BTreeMap<String, TensorShape> = BTreeMap::new();
    for node in g.nodes() {
        let id = node.id.as_str();
        let arg = |k: usize| shapes[&node.inputs[k]];
        let out = match &node.op {
            Op::Input {
                channels,
                height,
                width,
            } => {
                if (input.c, input.h, input.w) != (*channels, *height, *width) || input.n == 0 {
                    return Err(shape_err(
                        id,
                        format!("input {input} does not match declared {channels}x{height}x{width}"),
                    ));
                }
                input
            }
            Op::Conv2d(a) => {
                let x = arg(0);
                if x.c != a.in_channels {
                    return Err(shape_err(
                        id,
                        format!("expects {} input channels, got {}", a.in_channels, x.c),
                    ));
                }
                let (oh, ow) = a
                    .output_extent(x.h, x.w)
                    .filter(|&(h, w)| h >= 1 && w >= 1)
                    .ok_or_else(|| shape_err(id, format!("non-positive output extent for {x}")))?;
                TensorShape::new(x.n, a.out_channels, oh, ow)
            }
            Op::MaxPool(p) | Op::AvgPool(p) => {
                let x = arg(0);
                let (oh, ow) = p
                    .output_extent(x.h, x.w)
                    .ok_or_else(|| shape_err(id, format!("non-positive output extent for {x}")))?;
                TensorShape::new(x.n, x.c, oh, ow)
            }
            Op::BatchNorm(bn) => {
                let x = arg(0);
                if x.c != bn.channels {
                    return Err(shape_err(
                        id,
                        format!("expects {} channels, got {}", bn.channels, x.c),
                    ));
                }
                x
            }
            Op::Dense(d) => {
                let x = arg(0);
                if x.per_item() != d.in_features {
                    return Err(shape_err(
                        id,
                        format!("expects {} features, got {}", d.in_features, x.per_item()),
                    ));
                }
                TensorShape::new(x.n, d.out_features, 1, 1)
            }
            Op::ChannelSelect { kept } => {
                let x = arg(0);
                if kept.iter().any(|&k| k >= x.c) {
                    return Err(Error::BadIndices(format!(
                        "`{id}` selects beyond {} channels",
                        x.c
                    )));
                }
                TensorShape { c: kept.len(), ..x }
            }
            Op::Add => {
                let (a, b) = (arg(0), arg(1));
                if a != b {
                    return Err(shape_err(id, format!("incompatible Add inputs {a} and {b}")));
                }
                a
            }
            Op::Relu | Op::Output => arg(0),
        };
        shapes.insert(node.id.clone(), out);
    }
    Ok(shapes)
}
