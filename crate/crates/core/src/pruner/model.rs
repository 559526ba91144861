use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::residual::{find_residual_blocks, prune_residual_block, BlockReport, ExitMode};
use super::{prune_layer, LayerPruneResult, PruneSchedule, SamplingConfig, Strategy};
use crate::error::Result;
use crate::graph::Graph;
use crate::infer::{count_flops, FlopsReport};
use crate::sampler::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneOptions {
    pub strategy: Strategy,
    pub sampling: SamplingConfig,
    /// Prune detected residual blocks as a unit (entry select, exit
    /// correction) instead of layer by layer.
    pub residual: bool,
    pub exit_mode: ExitMode,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Lasso,
            sampling: SamplingConfig::default(),
            residual: true,
            exit_mode: ExitMode::Corrected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub tool_version: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub options: PruneOptions,
    /// Caller-supplied configuration, echoed verbatim.
    pub config: Option<serde_json::Value>,
    pub schedule: PruneSchedule,
    pub layers: Vec<LayerPruneResult>,
    pub blocks: Vec<BlockReport>,
    pub flops_before: FlopsReport,
    pub flops_after: FlopsReport,
    pub predicted_speedup: Option<f64>,
    pub achieved_speedup: f64,
}

impl PruneReport {
    /// One line per layer: id, `c→c′`, held-out error, λ.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<20} {:>11} {:>12} {:>12} {:>6}\n",
            "layer", "channels", "rel_err", "lambda", "padded"
        );
        for l in &self.layers {
            s.push_str(&format!(
                "{:<20} {:>11} {:>12.6e} {:>12.6e} {:>6}\n",
                l.layer_id,
                format!("{}->{}", l.channels_before, l.kept.len()),
                l.rel_err,
                l.lambda,
                if l.padded { "yes" } else { "" }
            ));
        }
        for b in &self.blocks {
            s.push_str(&format!("block {:<14} block_rel_err {:.6e}\n", b.add, b.block_rel_err));
        }
        s.push_str(&format!(
            "flops {} -> {}, speed-up {:.4}\n",
            self.flops_before.total, self.flops_after.total, self.achieved_speedup
        ));
        s
    }
}

/// Prunes every scheduled layer in topological order, always drawing `X`
/// from the graph pruned so far and `Y` from `g`.
pub fn prune_model(
    g: &Graph,
    ds: &Dataset,
    schedule: &PruneSchedule,
    opts: &PruneOptions,
) -> Result<(Graph, PruneReport)> {
    schedule.validate(g)?;
    let original = g;
    let mut current = g.clone();
    let blocks = if opts.residual {
        find_residual_blocks(g)?
    } else {
        Vec::new()
    };
    let block_of: BTreeMap<&str, usize> = blocks
        .iter()
        .enumerate()
        .flat_map(|(i, b)| b.branch.iter().map(move |id| (id.as_str(), i)))
        .collect();

    let mut layers = Vec::new();
    let mut block_reports = Vec::new();
    let mut done_blocks = vec![false; blocks.len()];
    for id in g.topo_order() {
        match block_of.get(id.as_str()) {
            Some(&bi) => {
                let blk = &blocks[bi];
                if done_blocks[bi] || !blk.branch.iter().any(|b| schedule.per_layer.contains_key(b)) {
                    continue;
                }
                done_blocks[bi] = true;
                let budgets: Vec<usize> = blk
                    .branch
                    .iter()
                    .map(|b| match schedule.per_layer.get(b) {
                        Some(&k) => Ok(k),
                        None => current.conv_attrs(b).map(|a| a.in_channels),
                    })
                    .collect::<Result<_>>()?;
                let (next, res, rep) = prune_residual_block(
                    &current,
                    original,
                    blk,
                    &budgets,
                    opts.strategy,
                    ds,
                    &opts.sampling,
                    opts.exit_mode,
                )?;
                current = next;
                layers.extend(res);
                block_reports.push(rep);
            }
            None => {
                let Some(&k) = schedule.per_layer.get(id) else { continue };
                let (res, next) =
                    prune_layer(&current, original, id, k, opts.strategy, ds, &opts.sampling)?;
                current = next;
                layers.push(res);
            }
        }
    }

    let input = g.input_shape(1);
    let flops_before = count_flops(original, input)?;
    let flops_after = count_flops(&current, input)?;
    let achieved_speedup = if flops_after.total == 0 {
        1.0
    } else {
        flops_before.total as f64 / flops_after.total as f64
    };
    let report = PruneReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: opts.sampling.seed,
        strategy: opts.strategy,
        options: opts.clone(),
        config: None,
        schedule: schedule.clone(),
        layers,
        blocks: block_reports,
        flops_before,
        flops_after,
        predicted_speedup: schedule.predicted_speedup,
        achieved_speedup,
    };
    Ok((current, report))
}
