use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::is_input_fed;
use crate::error::{Error, Result};
use crate::graph::{
    apply_channel_prune, insert_channel_select, removable_producer, ConvAttrs, Graph, LayerNode, Op,
    TensorShape,
};
use crate::infer::count_flops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulePolicy {
    /// Shallow kept ratio divided by deep kept ratio.
    pub shallow_deep_ratio: f64,
    pub frozen_layers: BTreeSet<String>,
    /// First deep layer; layers before it in topological order are shallow.
    pub boundary: Option<String>,
}

impl Default for SchedulePolicy {
    fn default() -> Self {
        Self {
            shallow_deep_ratio: 1.0,
            frozen_layers: BTreeSet::new(),
            boundary: None,
        }
    }
}

/// Kept input-channel counts per conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub target_speedup: f64,
    #[serde(default)]
    pub policy: SchedulePolicy,
    #[serde(default)]
    pub per_layer: BTreeMap<String, usize>,
    #[serde(default)]
    pub predicted_speedup: Option<f64>,
}

impl PruneSchedule {
    pub fn empty() -> Self {
        Self {
            target_speedup: 1.0,
            policy: SchedulePolicy::default(),
            per_layer: BTreeMap::new(),
            predicted_speedup: Some(1.0),
        }
    }

    /// Checks every entry against `g`: a prunable conv, not frozen, with
    /// `1 ≤ c′ ≤ c`.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        let prunable: BTreeSet<String> = prunable_layers(g)?.into_iter().collect();
        for (id, &k) in &self.per_layer {
            if self.policy.frozen_layers.contains(id) {
                return Err(Error::Config(format!("layer `{id}` is frozen but scheduled")));
            }
            if !prunable.contains(id) {
                return Err(Error::Config(format!("layer `{id}` is not a prunable conv")));
            }
            let c = g.conv_attrs(id)?.in_channels;
            if k == 0 || k > c {
                return Err(Error::BudgetOutOfRange {
                    budget: k,
                    channels: c,
                });
            }
        }
        Ok(())
    }
}

/// Convs whose input channels can be pruned: ungrouped and not fed by the
/// network input. Topological order.
pub fn prunable_layers(g: &Graph) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for node in g.nodes() {
        if let Op::Conv2d(a) = &node.op {
            if a.groups == 1 && !is_input_fed(g, &node.id)? {
                out.push(node.id.clone());
            }
        }
    }
    Ok(out)
}

fn set_attrs(nodes: &mut BTreeMap<String, LayerNode>, id: &str, f: impl FnOnce(&mut ConvAttrs)) {
    if let Some(LayerNode {
        op: Op::Conv2d(a), ..
    }) = nodes.get_mut(id)
    {
        f(a);
    }
}

/// Applies `per_layer` to the structure of `g` only, the same way pruning
/// would, and returns the weightless result.
fn simulate(g: &Graph, per_layer: &BTreeMap<String, usize>) -> Result<Graph> {
    let mut sim = g.skeleton();
    for id in g.topo_order() {
        let Some(&k) = per_layer.get(id) else { continue };
        let c = sim.conv_attrs(id)?.in_channels;
        if k == c {
            continue;
        }
        let path = removable_producer(&sim, id);
        let (mut nodes, mut topo, _) = sim.into_parts();
        set_attrs(&mut nodes, id, |a| a.in_channels = k);
        match path {
            Ok(p) => set_attrs(&mut nodes, &p.producer, |a| a.out_channels = k),
            Err(Error::ProducerNotRemovable { .. }) => {
                let mut sel = format!("{id}_select");
                let mut n = 1;
                while nodes.contains_key(&sel) {
                    n += 1;
                    sel = format!("{id}_select{n}");
                }
                let node = nodes.get_mut(id).expect("exists");
                let producer = std::mem::replace(&mut node.inputs[0], sel.clone());
                nodes.insert(
                    sel.clone(),
                    LayerNode::new(
                        sel.clone(),
                        vec![producer],
                        Op::ChannelSelect {
                            kept: (0..k).collect(),
                        },
                    ),
                );
                let pos = topo.iter().position(|t| t == id).expect("in topo order");
                topo.insert(pos, sel);
            }
            Err(e) => return Err(e),
        }
        sim = Graph::from_parts_unchecked(nodes, topo);
    }
    Ok(sim)
}

/// Predicted FLOP speed-up of `per_layer` on `g` for inputs of `input`.
pub fn predict_speedup(g: &Graph, input: TensorShape, per_layer: &BTreeMap<String, usize>) -> Result<f64> {
    let before = count_flops(g, input)?.total;
    let after = count_flops(&simulate(g, per_layer)?, input)?.total;
    if after == 0 {
        return Ok(1.0);
    }
    Ok(before as f64 / after as f64)
}

/// Kept ratios for a deep ratio `r`: deep layers keep `min(r, 1)`, shallow
/// layers `min(ρ·r, 1)`; counts are rounded and clamped to `[1, c]`.
fn counts_for(
    layers: &[(String, usize, bool)],
    rho: f64,
    r: f64,
) -> BTreeMap<String, usize> {
    layers
        .iter()
        .map(|(id, c, shallow)| {
            let ratio = if *shallow { rho * r } else { r }.min(1.0);
            let k = ((ratio * *c as f64).round() as usize).clamp(1, *c);
            (id.clone(), k)
        })
        .collect()
}

/// Solves for the deep kept ratio whose rounded schedule comes closest to
/// `target_speedup` while shallow layers keep `ρ` times as much.
pub fn make_schedule(
    g: &Graph,
    input: TensorShape,
    target_speedup: f64,
    shallow_deep_ratio: f64,
    frozen: &BTreeSet<String>,
    boundary: Option<&str>,
) -> Result<PruneSchedule> {
    if !(target_speedup >= 1.0) || !target_speedup.is_finite() {
        return Err(Error::Config(format!("target speed-up must be >= 1, got {target_speedup}")));
    }
    let rho = shallow_deep_ratio;
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::Config(format!("shallow/deep ratio must be > 0, got {rho}")));
    }
    for f in frozen {
        g.node(f)?;
    }
    let split = match boundary {
        Some(b) => {
            g.node(b)?;
            g.topo_order().iter().position(|id| id == b).expect("present")
        }
        None => 0,
    };
    let layers: Vec<(String, usize, bool)> = prunable_layers(g)?
        .into_iter()
        .filter(|id| !frozen.contains(id))
        .map(|id| {
            let pos = g.topo_order().iter().position(|t| *t == id).expect("present");
            let c = g.conv_attrs(&id).expect("conv").in_channels;
            (id, c, pos < split)
        })
        .collect();
    let policy = SchedulePolicy {
        shallow_deep_ratio: rho,
        frozen_layers: frozen.clone(),
        boundary: boundary.map(str::to_string),
    };
    let eval = |r: f64| -> Result<(BTreeMap<String, usize>, f64)> {
        let counts = counts_for(&layers, rho, r);
        let s = predict_speedup(g, input, &counts)?;
        Ok((counts, s))
    };

    let top = 1.0f64.max(1.0 / rho);
    let (full, full_s) = eval(top)?;
    let done = |per_layer, predicted| PruneSchedule {
        target_speedup,
        policy: policy.clone(),
        per_layer,
        predicted_speedup: Some(predicted),
    };
    if full_s >= target_speedup {
        return Ok(done(full, full_s));
    }
    let (least, least_s) = eval(0.0)?;
    if least_s < target_speedup {
        return Err(Error::UnreachableTarget {
            target: target_speedup,
            best: least_s,
        });
    }
    // Invariant: speedup(lo) ≥ target > speedup(hi).
    let (mut lo, mut hi) = (0.0, top);
    let (mut lo_val, mut hi_val) = ((least, least_s), (full, full_s));
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (counts, s) = eval(mid)?;
        if s >= target_speedup {
            lo = mid;
            lo_val = (counts, s);
        } else {
            hi = mid;
            hi_val = (counts, s);
        }
        if lo_val.0 == hi_val.0 || hi - lo < 1e-12 {
            break;
        }
    }
    let pick = if (hi_val.1 - target_speedup).abs() < (lo_val.1 - target_speedup).abs() {
        hi_val
    } else {
        lo_val
    };
    Ok(done(pick.0, pick.1))
}

/// Applies a schedule with real graph rewrites but no reconstruction: each
/// layer keeps channels `0..c′` and its existing weights for them.
pub fn apply_schedule_unfitted(g: &Graph, schedule: &PruneSchedule) -> Result<Graph> {
    schedule.validate(g)?;
    let mut cur = g.clone();
    for id in g.topo_order() {
        let Some(&k) = schedule.per_layer.get(id) else { continue };
        let attrs = cur.conv_attrs(id)?.clone();
        if k == attrs.in_channels {
            continue;
        }
        let kept: Vec<usize> = (0..k).collect();
        let cols = super::kept_columns(&kept, attrs.kernel_area());
        let w = cur.conv_weight_matrix(id)?.select_cols(&cols);
        cur = match apply_channel_prune(&cur, id, &kept, &w, None) {
            Ok(next) => next,
            Err(Error::ProducerNotRemovable { .. }) => {
                let producer = cur.node(id)?.inputs[0].clone();
                insert_channel_select(&cur, &producer, id, &kept)?
            }
            Err(e) => return Err(e),
        };
    }
    Ok(cur)
}
