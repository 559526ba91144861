use serde::{Deserialize, Serialize};

use super::{prune_layer_inner, ExitTarget, LayerPruneResult, SamplingConfig, Strategy};
use crate::error::{Error, Result};
use crate::graph::{Graph, Op};
use crate::sampler::Dataset;

/// A residual block: a conv branch and a shortcut summed by one Add.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlock {
    /// Branch convs in forward order; the last one feeds `add` directly.
    pub branch: Vec<String>,
    /// The Add input that is not the branch.
    pub shortcut: String,
    pub add: String,
}

/// Target used when refitting the last branch conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    /// Original Add output minus the current shortcut.
    #[default]
    Corrected,
    /// The last conv's own original output.
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub add: String,
    pub branch: Vec<String>,
    pub exit_mode: ExitMode,
    /// Held-out relative error of the Add output.
    pub block_rel_err: f64,
}

/// Kept ratios of the three bottleneck convs: `base·[2, 4, 3]/1.5`, each
/// capped at 1.
pub fn branch_keep_ratios(base: f64) -> [f64; 3] {
    [2.0, 4.0, 3.0].map(|w| (base * w / 1.5).min(1.0))
}

/// Walks back from `start` through single-consumer convs, ReLUs and BNs.
/// Returns the convs met (forward order) and the node where the walk
/// stopped.
fn walk_chain(g: &Graph, start: &str) -> Result<(Vec<String>, String)> {
    let consumers = g.consumers();
    let mut convs = Vec::new();
    let mut cur = start.to_string();
    loop {
        let node = g.node(&cur)?;
        let single = consumers.get(cur.as_str()).map_or(0, Vec::len) == 1;
        match &node.op {
            Op::Conv2d(_) | Op::Relu | Op::BatchNorm(_) if single => {
                if matches!(node.op, Op::Conv2d(_)) {
                    convs.push(cur.clone());
                }
                cur = node.inputs[0].clone();
            }
            _ => break,
        }
    }
    convs.reverse();
    Ok((convs, cur))
}

/// Finds Add nodes whose two inputs fork from one node, one side a conv
/// chain ending in a conv, the other a shorter path (identity or
/// projection).
pub fn find_residual_blocks(g: &Graph) -> Result<Vec<ResidualBlock>> {
    let mut out = Vec::new();
    for node in g.nodes() {
        if !matches!(node.op, Op::Add) {
            continue;
        }
        let (a, b) = (&node.inputs[0], &node.inputs[1]);
        let (ca, fa) = walk_chain(g, a)?;
        let (cb, fb) = walk_chain(g, b)?;
        if fa != fb || ca.len() == cb.len() {
            continue;
        }
        let (branch, last, shortcut) = if ca.len() > cb.len() { (ca, a, b) } else { (cb, b, a) };
        if !matches!(g.node(last)?.op, Op::Conv2d(_)) {
            continue;
        }
        out.push(ResidualBlock {
            branch,
            shortcut: shortcut.clone(),
            add: node.id.clone(),
        });
    }
    Ok(out)
}

fn check_block(g: &Graph, block: &ResidualBlock) -> Result<()> {
    let bad = |reason: String| Error::InvalidGraph(format!("block `{}`: {reason}", block.add));
    let add = g.node(&block.add)?;
    if !matches!(add.op, Op::Add) {
        return Err(bad("not an Add".into()));
    }
    let last = block.branch.last().ok_or_else(|| bad("empty branch".into()))?;
    let ins = &add.inputs;
    let ok = (ins[0] == *last && ins[1] == block.shortcut) || (ins[1] == *last && ins[0] == block.shortcut);
    if !ok {
        return Err(bad(format!(
            "inputs are {ins:?}, expected `{last}` and `{}`",
            block.shortcut
        )));
    }
    for id in &block.branch {
        g.conv_attrs(id)?;
    }
    Ok(())
}

/// Prunes one residual block: the entry conv through a ChannelSelect on the
/// branch edge, middle convs as ordinary layers, and the exit conv against
/// the block-level target chosen by `exit`.
///
/// `budgets[i]` is the kept input-channel count of `block.branch[i]`.
#[allow(clippy::too_many_arguments)]
pub fn prune_residual_block(
    current: &Graph,
    original: &Graph,
    block: &ResidualBlock,
    budgets: &[usize],
    strategy: Strategy,
    ds: &Dataset,
    cfg: &SamplingConfig,
    exit: ExitMode,
) -> Result<(Graph, Vec<LayerPruneResult>, BlockReport)> {
    check_block(current, block)?;
    check_block(original, block)?;
    if budgets.len() != block.branch.len() {
        return Err(Error::Config(format!(
            "{} budgets for a {}-conv branch",
            budgets.len(),
            block.branch.len()
        )));
    }
    let mut g = current.clone();
    let mut results = Vec::new();
    let mut block_rel_err = None;
    let last = block.branch.len() - 1;
    for (i, (id, &k)) in block.branch.iter().zip(budgets).enumerate() {
        let target = (i == last).then(|| ExitTarget {
            add: &block.add,
            shortcut: &block.shortcut,
            mode: exit,
        });
        let out = prune_layer_inner(&g, original, id, k, strategy, ds, cfg, target)?;
        g = out.graph;
        results.push(out.result);
        block_rel_err = out.block_rel_err.or(block_rel_err);
    }
    let report = BlockReport {
        add: block.add.clone(),
        branch: block.branch.clone(),
        exit_mode: exit,
        block_rel_err: block_rel_err.expect("exit layer reports block error"),
    };
    Ok((g, results, report))
}
