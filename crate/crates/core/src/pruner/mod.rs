//! Single-layer pruning, naive baselines, FLOP-targeted schedules,
//! whole-model pruning and residual blocks.
//!
//! Pruning layer `L` means removing input channels of conv `L`. When the
//! producer of those channels is a plain conv reached through channel-wise
//! nodes, its filters are deleted too; otherwise a ChannelSelect is spliced
//! in front of `L`.

mod model;
mod residual;
mod schedule;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    apply_channel_prune, infer_shapes, insert_channel_select, with_layer_params, Graph, Op,
};
use crate::lasso::{build_channel_design, search_lambda, LambdaProbe};
use crate::sampler::{
    build_sampleset, gather_rows, sample_positions, Dataset, RowRequest, SampleSet, TargetSource,
};
use crate::tensor::{lstsq_basic, matmul, matmul_nt, normal_equation_residual, Matrix};

pub use model::{prune_model, PruneOptions, PruneReport};
pub use residual::{branch_keep_ratios, find_residual_blocks, prune_residual_block, BlockReport, ExitMode, ResidualBlock};
pub use schedule::{
    apply_schedule_unfitted, make_schedule, predict_speedup, prunable_layers, PruneSchedule,
    SchedulePolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Lasso,
    FirstK,
    MaxResponse,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Lasso => "lasso",
            Strategy::FirstK => "first_k",
            Strategy::MaxResponse => "max_response",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lasso" => Ok(Strategy::Lasso),
            "first_k" | "first-k" => Ok(Strategy::FirstK),
            "max_response" | "max-response" => Ok(Strategy::MaxResponse),
            _ => Err(Error::Config(format!(
                "unknown strategy `{s}` (expected lasso, first_k or max_response)"
            ))),
        }
    }
}

/// How sample matrices are drawn for each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Use only the first `images` dataset entries; all when absent.
    pub images: Option<usize>,
    pub samples_per_image: usize,
    pub seed: u64,
    pub target_source: TargetSource,
    /// Selection/refit rounds per layer.
    pub alternations: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            images: None,
            samples_per_image: 10,
            seed: 0,
            target_source: TargetSource::Original,
            alternations: 1,
        }
    }
}

/// Seed for one layer's positions, derived from the run seed and layer id.
pub fn layer_seed(seed: u64, layer_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in layer_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finalizer
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `(even, odd)` row indices: fitting rows and held-out rows.
pub fn split_rows(n: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n).step_by(2).collect(), (1..n).step_by(2).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    pub beta: Vec<f64>,
    pub path: Vec<LambdaProbe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Removal {
    /// Producer filters were deleted.
    Filters,
    /// A ChannelSelect feeds the layer.
    ChannelSelect,
    /// Every channel kept; only the weights changed.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneResult {
    pub layer_id: String,
    pub strategy: Strategy,
    pub channels_before: usize,
    pub kept: Vec<usize>,
    /// Held-out relative reconstruction error of the layer output.
    pub rel_err: f64,
    pub lambda: f64,
    pub padded: bool,
    /// Max-abs entry of `Aᵀ(A·coef − Y)` on the refit design.
    pub normal_residual: f64,
    pub refit_rank: usize,
    pub refit_columns: usize,
    pub fit_rows: usize,
    pub held_out_rows: usize,
    pub removal: Removal,
    pub solver: Option<SolverDiagnostics>,
}

/// Keeps channels `0..budget`.
pub fn select_first_k(c: usize, budget: usize) -> Result<Vec<usize>> {
    check_budget(budget, c)?;
    Ok((0..budget).collect())
}

/// Keeps the `budget` channels whose weight blocks have the largest
/// absolute sum; ties go to the lower index. `w` is `n × channels·k_h·k_w`.
pub fn select_max_response(w: &Matrix, channels: usize, budget: usize) -> Result<Vec<usize>> {
    check_budget(budget, channels)?;
    if channels == 0 || w.cols() % channels != 0 {
        return Err(Error::Shape {
            node: "<weights>".into(),
            reason: format!("{} columns do not split into {channels} channels", w.cols()),
        });
    }
    let block = w.cols() / channels;
    let mut scores = vec![0.0; channels];
    for r in 0..w.rows() {
        for (k, v) in w.row(r).iter().enumerate() {
            scores[k / block] += v.abs();
        }
    }
    let mut order: Vec<usize> = (0..channels).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..budget].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

fn check_budget(budget: usize, channels: usize) -> Result<()> {
    if budget == 0 || budget > channels {
        return Err(Error::BudgetOutOfRange { budget, channels });
    }
    Ok(())
}

/// Least-squares reconstruction of one layer on a fixed channel support.
#[derive(Debug, Clone, PartialEq)]
pub struct Refit {
    /// `n × |kept|·block`, β already folded in.
    pub weights: Matrix,
    /// Intercept added to the target's bias.
    pub intercept: Vec<f64>,
    pub normal_residual: f64,
    pub rank: usize,
    pub columns: usize,
}

/// Columns of `x` that belong to the kept channel blocks.
pub fn kept_columns(kept: &[usize], block: usize) -> Vec<usize> {
    kept.iter().flat_map(|&k| k * block..(k + 1) * block).collect()
}

/// Solves `min ‖[X_kept·diag(scale) | 1]·coef − Y‖` and folds `scale` back
/// into the weights.
///
/// When the design is rank deficient the minimizer is not unique. With an
/// `anchor` (the layer's current `n × c·block` weights) the solution is the
/// anchor plus the basic solution for the anchor's residual, so directions
/// the samples cannot see keep their current weights; without one, the
/// plain basic solution is returned.
pub fn refit_layer(
    x: &Matrix,
    y: &Matrix,
    block: usize,
    kept: &[usize],
    scale: Option<&[f64]>,
    anchor: Option<&Matrix>,
) -> Result<Refit> {
    let cols = kept_columns(kept, block);
    let p = cols.len();
    let rows = x.rows();
    let mut a = Matrix::zeros(rows, p + 1);
    for r in 0..rows {
        let src = x.row(r);
        let dst = a.row_mut(r);
        for (j, &c) in cols.iter().enumerate() {
            let s = scale.map_or(1.0, |s| s[j / block]);
            dst[j] = src[c] * s;
        }
        dst[p] = 1.0;
    }
    let (mut coef, rank) = lstsq_basic(&a, y)?;
    if let Some(w0) = anchor.filter(|_| rank < p + 1) {
        let scale_of = |j: usize| scale.map_or(1.0, |s| s[j / block]);
        let start = Matrix::from_fn(p + 1, y.cols(), |j, o| {
            if j < p && scale_of(j) != 0.0 {
                w0[(o, cols[j])] / scale_of(j)
            } else {
                0.0
            }
        });
        let resid = y.sub(&matmul(&a, &start)?)?;
        let (delta, _) = lstsq_basic(&a, &resid)?;
        coef = start.add(&delta)?;
    }
    let normal_residual = normal_equation_residual(&a, &coef, y)?;
    let n = y.cols();
    let weights = Matrix::from_fn(n, p, |o, j| {
        coef[(j, o)] * scale.map_or(1.0, |s| s[j / block])
    });
    let intercept = (0..n).map(|o| coef[(p, o)]).collect();
    Ok(Refit {
        weights,
        intercept,
        normal_residual,
        rank,
        columns: p + 1,
    })
}

/// Layer output predicted by a refit, without the original bias.
pub fn refit_predict(x: &Matrix, block: usize, kept: &[usize], refit: &Refit) -> Result<Matrix> {
    let xk = x.select_cols(&kept_columns(kept, block));
    let mut out = matmul_nt(&xk, &refit.weights)?;
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(&refit.intercept) {
            *v += b;
        }
    }
    Ok(out)
}

/// `‖approx − reference‖ / ‖reference‖`, or the absolute error when the
/// reference is zero.
pub fn relative_or_absolute(approx: &Matrix, reference: &Matrix) -> Result<f64> {
    let diff = approx.sub(reference)?.frobenius_norm();
    let denom = reference.frobenius_norm();
    Ok(if denom > 0.0 { diff / denom } else { diff })
}

/// Sample matrices for `layer_id` exactly as [`prune_layer`] draws them.
pub fn layer_samples(
    current: &Graph,
    original: &Graph,
    layer_id: &str,
    ds: &Dataset,
    cfg: &SamplingConfig,
) -> Result<SampleSet> {
    let ds = subset_dataset(ds, cfg);
    let out_shape = infer_shapes(current, current.input_shape(1))?[layer_id];
    let positions = sample_positions(
        ds.len(),
        out_shape,
        cfg.samples_per_image,
        layer_seed(cfg.seed, layer_id),
    );
    build_sampleset(current, original, layer_id, &ds, &positions, cfg.target_source)
}

fn subset_dataset<'a>(ds: &'a Dataset, cfg: &SamplingConfig) -> std::borrow::Cow<'a, Dataset> {
    match cfg.images {
        Some(n) if n < ds.len() => std::borrow::Cow::Owned(ds.truncated(n)),
        _ => std::borrow::Cow::Borrowed(ds),
    }
}

/// Exit-of-block target: the refit aims at `add − shortcut` instead of the
/// layer's own original output.
#[derive(Debug, Clone)]
pub(crate) struct ExitTarget<'a> {
    pub add: &'a str,
    pub shortcut: &'a str,
    pub mode: ExitMode,
}

pub(crate) struct LayerOutcome {
    pub result: LayerPruneResult,
    pub graph: Graph,
    pub block_rel_err: Option<f64>,
}

/// Prunes the input channels of conv `layer_id` down to `budget`.
///
/// `X` comes from `current`, `Y` from `original` (per `cfg`). Selection and
/// refit use the even sample rows; `rel_err` is measured on the odd rows.
pub fn prune_layer(
    current: &Graph,
    original: &Graph,
    layer_id: &str,
    budget: usize,
    strategy: Strategy,
    ds: &Dataset,
    cfg: &SamplingConfig,
) -> Result<(LayerPruneResult, Graph)> {
    let out = prune_layer_inner(current, original, layer_id, budget, strategy, ds, cfg, None)?;
    Ok((out.result, out.graph))
}

struct Selection {
    kept: Vec<usize>,
    scale: Option<Vec<f64>>,
    lambda: f64,
    padded: bool,
    solver: Option<SolverDiagnostics>,
}

fn lasso_select(fit: &SampleSet, w: &Matrix, budget: usize, alternations: usize) -> Result<Selection> {
    let block = fit.block;
    let mut w_cur = w.clone();
    let rounds = alternations.max(1);
    let mut sel = None;
    for round in 0..rounds {
        let design = build_channel_design(fit, &w_cur)?;
        let found = search_lambda(&design, budget)?;
        let scale: Vec<f64> = found
            .kept
            .iter()
            .map(|&k| match found.beta.beta[k] {
                b if b != 0.0 => b,
                _ => 1.0,
            })
            .collect();
        if round + 1 < rounds {
            let refit = refit_layer(&fit.x, &fit.y, block, &found.kept, Some(&scale), Some(&w_cur))?;
            for (j, &k) in found.kept.iter().enumerate() {
                for o in 0..w_cur.rows() {
                    for t in 0..block {
                        w_cur[(o, k * block + t)] = refit.weights[(o, j * block + t)];
                    }
                }
            }
        }
        sel = Some(Selection {
            kept: found.kept,
            scale: Some(scale),
            lambda: found.lambda,
            padded: found.padded,
            solver: Some(SolverDiagnostics {
                iterations: found.beta.iterations,
                converged: found.beta.converged,
                kkt_residual: found.beta.kkt_residual,
                beta: found.beta.beta,
                path: found.path,
            }),
        });
    }
    Ok(sel.expect("at least one round"))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn prune_layer_inner(
    current: &Graph,
    original: &Graph,
    layer_id: &str,
    budget: usize,
    strategy: Strategy,
    ds: &Dataset,
    cfg: &SamplingConfig,
    exit: Option<ExitTarget<'_>>,
) -> Result<LayerOutcome> {
    let attrs = current.conv_attrs(layer_id)?.clone();
    let c = attrs.in_channels;
    check_budget(budget, c)?;
    if attrs.groups != 1 {
        return Err(Error::Unsupported {
            node: layer_id.to_string(),
            reason: "grouped convolution cannot be pruned".into(),
        });
    }

    let s = layer_samples(current, original, layer_id, ds, cfg)?;
    if s.len() < 2 {
        return Err(Error::Dataset(format!(
            "`{layer_id}` needs at least 2 sample rows, got {}",
            s.len()
        )));
    }

    // Block-level rows: original Add output and current shortcut. The
    // corrected target replaces Y for the refit only; selection still sees
    // the layer's own output.
    let mut refit_y = None;
    let block_rows = match &exit {
        Some(e) => {
            let ds = subset_dataset(ds, cfg);
            let add = gather_rows(original, &ds, &s.positions, &[RowRequest::Pixels(e.add)])?.remove(0);
            let short = gather_rows(current, &ds, &s.positions, &[RowRequest::Pixels(e.shortcut)])?.remove(0);
            if e.mode == ExitMode::Corrected {
                let mut y = add.sub(&short)?;
                for r in 0..y.rows() {
                    for (v, b) in y.row_mut(r).iter_mut().zip(&s.bias) {
                        *v -= b;
                    }
                }
                refit_y = Some(y);
            }
            Some((add, short))
        }
        None => None,
    };

    let (even, odd) = split_rows(s.len());
    let fit = s.subset(&even);
    let held = s.subset(&odd);
    let w = current.conv_weight_matrix(layer_id)?;

    let sel = match strategy {
        Strategy::Lasso => lasso_select(&fit, &w, budget, cfg.alternations)?,
        Strategy::FirstK => Selection {
            kept: select_first_k(c, budget)?,
            scale: None,
            lambda: 0.0,
            padded: false,
            solver: None,
        },
        Strategy::MaxResponse => Selection {
            kept: select_max_response(&w, c, budget)?,
            scale: None,
            lambda: 0.0,
            padded: false,
            solver: None,
        },
    };

    let (fit_y, held_y) = match &refit_y {
        Some(y) => (y.select_rows(&even), y.select_rows(&odd)),
        None => (fit.y.clone(), held.y.clone()),
    };
    let mut refit = refit_layer(&fit.x, &fit_y, s.block, &sel.kept, sel.scale.as_deref(), Some(&w))?;
    // Evaluate what is actually installed: f32 weights.
    for v in refit.weights.as_mut_slice() {
        *v = f64::from(*v as f32);
    }
    let pred = refit_predict(&held.x, s.block, &sel.kept, &refit)?;
    let rel_err = relative_or_absolute(&pred, &held_y)?;

    let block_rel_err = match &block_rows {
        Some((add, short)) => {
            let mut total = pred.add(&short.select_rows(&odd))?;
            for r in 0..total.rows() {
                for (v, b) in total.row_mut(r).iter_mut().zip(&s.bias) {
                    *v += b;
                }
            }
            Some(relative_or_absolute(&total, &add.select_rows(&odd))?)
        }
        None => None,
    };

    let new_bias: Vec<f64> = s.bias.iter().zip(&refit.intercept).map(|(b, d)| b + d).collect();
    let (graph, removal) = rewrite_layer(current, layer_id, &sel.kept, c, &refit.weights, &new_bias)?;

    Ok(LayerOutcome {
        result: LayerPruneResult {
            layer_id: layer_id.to_string(),
            strategy,
            channels_before: c,
            kept: sel.kept,
            rel_err,
            lambda: sel.lambda,
            padded: sel.padded,
            normal_residual: refit.normal_residual,
            refit_rank: refit.rank,
            refit_columns: refit.columns,
            fit_rows: fit.len(),
            held_out_rows: held.len(),
            removal,
            solver: sel.solver,
        },
        graph,
        block_rel_err,
    })
}

fn rewrite_layer(
    g: &Graph,
    layer_id: &str,
    kept: &[usize],
    channels: usize,
    weights: &Matrix,
    bias: &[f64],
) -> Result<(Graph, Removal)> {
    if kept.len() == channels {
        return Ok((with_layer_params(g, layer_id, weights, Some(bias))?, Removal::None));
    }
    match apply_channel_prune(g, layer_id, kept, weights, Some(bias)) {
        Ok(out) => Ok((out, Removal::Filters)),
        Err(Error::ProducerNotRemovable { .. }) => {
            let producer = g.node(layer_id)?.inputs[0].clone();
            let selected = insert_channel_select(g, &producer, layer_id, kept)?;
            Ok((
                with_layer_params(&selected, layer_id, weights, Some(bias))?,
                Removal::ChannelSelect,
            ))
        }
        Err(e) => Err(e),
    }
}

/// True when a conv's input channels trace straight back to the network
/// input through channel-wise nodes.
pub(crate) fn is_input_fed(g: &Graph, conv_id: &str) -> Result<bool> {
    let mut cur = g.node(conv_id)?.inputs[0].as_str();
    loop {
        let node = g.node(cur)?;
        match &node.op {
            Op::Input { .. } => return Ok(true),
            Op::Relu | Op::MaxPool(_) | Op::AvgPool(_) | Op::BatchNorm(_) | Op::ChannelSelect { .. } => {
                cur = node.inputs[0].as_str();
            }
            _ => return Ok(false),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::infer::forward;
    use crate::tensor::rel_error;

    fn chain(seed: u64) -> Graph {
        let mut b = GraphBuilder::new(3, 8, 8, seed);
        let c1 = b.conv("c1", "input", 6, 3, 1, 1);
        let r1 = b.relu("r1", &c1);
        let c2 = b.conv("c2", &r1, 5, 3, 1, 1);
        let r2 = b.relu("r2", &c2);
        b.output(&r2);
        b.build().unwrap()
    }

    fn cfg() -> SamplingConfig {
        SamplingConfig {
            samples_per_image: 40,
            ..Default::default()
        }
    }

    #[test]
    fn first_k_cases() {
        assert_eq!(select_first_k(4, 2).unwrap(), vec![0, 1]);
        assert_eq!(select_first_k(4, 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(matches!(select_first_k(4, 0), Err(Error::BudgetOutOfRange { .. })));
        assert!(select_first_k(4, 5).is_err());
    }

    #[test]
    fn max_response_drops_zero_block() {
        let mut w = Matrix::from_fn(2, 12, |_, _| 1.0);
        for r in 0..2 {
            for k in 4..8 {
                w[(r, k)] = 0.0;
            }
        }
        assert_eq!(select_max_response(&w, 3, 2).unwrap(), vec![0, 2]);
        let flat = Matrix::from_fn(2, 12, |_, _| -0.5);
        assert_eq!(select_max_response(&flat, 3, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn seeds_depend_on_layer_and_run() {
        assert_ne!(layer_seed(0, "a"), layer_seed(0, "b"));
        assert_ne!(layer_seed(0, "a"), layer_seed(1, "a"));
        assert_eq!(layer_seed(7, "conv"), layer_seed(7, "conv"));
    }

    #[test]
    fn identity_prune_preserves_output() {
        let g = chain(1);
        let ds = Dataset::synthetic(8, 3, 8, 8, 2);
        let (res, pruned) = prune_layer(&g, &g, "c2", 6, Strategy::FirstK, &ds, &cfg()).unwrap();
        assert!(res.rel_err <= 1e-5, "{}", res.rel_err);
        assert_eq!(res.removal, Removal::None);
        let x = &ds.images[0];
        let a = forward(&g, x, &[]).unwrap()["output"].to_matrix();
        let b = forward(&pruned, x, &[]).unwrap()["output"].to_matrix();
        assert!(rel_error(&b, &a).unwrap() <= 1e-4);
    }

    #[test]
    fn every_strategy_honours_budget() {
        let g = chain(3);
        let ds = Dataset::synthetic(8, 3, 8, 8, 4);
        for strategy in [Strategy::Lasso, Strategy::FirstK, Strategy::MaxResponse] {
            let (res, pruned) = prune_layer(&g, &g, "c2", 3, strategy, &ds, &cfg()).unwrap();
            assert_eq!(res.kept.len(), 3);
            assert_eq!(res.removal, Removal::Filters);
            assert_eq!(pruned.conv_attrs("c1").unwrap().out_channels, 3);
            assert_eq!(pruned.conv_attrs("c2").unwrap().in_channels, 3);
            let shapes = infer_shapes(&pruned, pruned.input_shape(1)).unwrap();
            assert_eq!(shapes["output"], infer_shapes(&g, g.input_shape(1)).unwrap()["output"]);
        }
    }

    #[test]
    fn input_fed_layer_uses_channel_select() {
        let g = chain(5);
        let ds = Dataset::synthetic(8, 3, 8, 8, 6);
        let (res, pruned) = prune_layer(&g, &g, "c1", 2, Strategy::Lasso, &ds, &cfg()).unwrap();
        assert_eq!(res.removal, Removal::ChannelSelect);
        assert!(pruned.contains("c1_select"));
        assert!(is_input_fed(&g, "c1").unwrap());
        assert!(!is_input_fed(&g, "c2").unwrap());
    }

    #[test]
    fn refit_is_least_squares_optimal() {
        let g = chain(7);
        let ds = Dataset::synthetic(8, 3, 8, 8, 8);
        let (res, _) = prune_layer(&g, &g, "c2", 4, Strategy::Lasso, &ds, &cfg()).unwrap();
        assert!(res.normal_residual <= 1e-8, "{}", res.normal_residual);
    }

    #[test]
    fn beta_folding_does_not_change_fit() {
        let g = chain(9);
        let ds = Dataset::synthetic(4, 3, 8, 8, 10);
        let s = layer_samples(&g, &g, "c2", &ds, &cfg()).unwrap();
        let kept = [0, 2, 5];
        let plain = refit_layer(&s.x, &s.y, s.block, &kept, None, None).unwrap();
        let scaled = refit_layer(&s.x, &s.y, s.block, &kept, Some(&[0.5, 3.0, -2.0]), None).unwrap();
        let a = refit_predict(&s.x, s.block, &kept, &plain).unwrap();
        let b = refit_predict(&s.x, s.block, &kept, &scaled).unwrap();
        assert!(rel_error(&b, &a).unwrap() < 1e-10);
    }
}
