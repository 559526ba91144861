//! The `chanprune` command line: `fold-bn`, `prune`, `eval`, `flops`.
//!
//! Data tables go to standard output, diagnostics to standard error. Any
//! error ends the command with exit code 1.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{fold_batchnorm, load_graph, read_graph_file, save_graph, Graph, Op, TensorShape};
use crate::infer::{count_flops, forward, Activation};
use crate::pruner::{
    make_schedule, prune_model, relative_or_absolute, ExitMode, PruneOptions, PruneSchedule,
    SamplingConfig, Strategy,
};
use crate::sampler::{load_dataset, Dataset, TargetSource};

/// Everything `prune` needs, read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    /// Defaults to the model path with a `.pkw` extension.
    pub weights: Option<PathBuf>,
    pub dataset: PathBuf,
    pub out_model: PathBuf,
    pub out_weights: Option<PathBuf>,
    /// Defaults to the output model path with a `.report.json` extension.
    pub report: Option<PathBuf>,
    pub seed: u64,
    pub target_speedup: f64,
    pub strategy: Strategy,
    pub shallow_deep_ratio: f64,
    pub boundary: Option<String>,
    pub frozen_layers: Vec<String>,
    pub samples_per_image: usize,
    pub image_count: Option<usize>,
    pub target_source: TargetSource,
    pub alternations: usize,
    pub residual: bool,
    pub exit_mode: ExitMode,
    /// A schedule file to use instead of solving for `target_speedup`.
    pub schedule: Option<PathBuf>,
    /// Per-layer kept counts applied on top of the schedule.
    pub overrides: BTreeMap<String, usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::new(),
            weights: None,
            dataset: PathBuf::new(),
            out_model: PathBuf::new(),
            out_weights: None,
            report: None,
            seed: 0,
            target_speedup: 2.0,
            strategy: Strategy::Lasso,
            shallow_deep_ratio: 1.0,
            boundary: None,
            frozen_layers: Vec::new(),
            samples_per_image: 10,
            image_count: None,
            target_source: TargetSource::Original,
            alternations: 1,
            residual: true,
            exit_mode: ExitMode::Corrected,
            schedule: None,
            overrides: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::graph::io_read(path)?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn weights_path(&self) -> PathBuf {
        self.weights.clone().unwrap_or_else(|| sibling_weights(&self.model))
    }

    pub fn out_weights_path(&self) -> PathBuf {
        self.out_weights.clone().unwrap_or_else(|| sibling_weights(&self.out_model))
    }

    pub fn report_path(&self) -> PathBuf {
        self.report
            .clone()
            .unwrap_or_else(|| self.out_model.with_extension("report.json"))
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            images: self.image_count,
            samples_per_image: self.samples_per_image,
            seed: self.seed,
            target_source: self.target_source,
            alternations: self.alternations,
        }
    }

    fn check_inputs(&self) -> Result<()> {
        for p in [&self.model, &self.weights_path(), &self.dataset] {
            if !p.exists() {
                return Err(Error::FileNotFound(p.clone()));
            }
        }
        if let Some(s) = &self.schedule {
            if !s.exists() {
                return Err(Error::FileNotFound(s.clone()));
            }
        }
        if self.out_model.as_os_str().is_empty() {
            return Err(Error::Config("out_model is required".into()));
        }
        Ok(())
    }
}

/// `model.json` → `model.pkw`.
pub fn sibling_weights(model: &Path) -> PathBuf {
    model.with_extension("pkw")
}

#[derive(Parser, Debug)]
#[command(name = "chanprune", version, about = "Channel pruning for convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fold BatchNorm layers into the preceding convolutions.
    FoldBn(FoldArgs),
    /// Prune a model as described by a run config.
    Prune(PruneArgs),
    /// Compare two models' outputs over a dataset.
    Eval(EvalArgs),
    /// Count FLOPs per layer.
    Flops(FlopsArgs),
}

#[derive(Args, Debug)]
struct FoldArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_weights: Option<PathBuf>,
    /// Seed of the random probe input used to verify the fold.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out_model: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target_speedup: Option<f64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    samples_per_image: Option<usize>,
    #[arg(long)]
    image_count: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    weights_a: Option<PathBuf>,
    #[arg(long)]
    model_b: PathBuf,
    #[arg(long)]
    weights_b: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long)]
    model: PathBuf,
    /// `NxCxHxW`.
    #[arg(long)]
    input_shape: String,
}

impl clap::ValueEnum for Strategy {
    fn value_variants<'a>() -> &'a [Self] {
        &[Strategy::Lasso, Strategy::FirstK, Strategy::MaxResponse]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Strategy::Lasso => "lasso",
            Strategy::FirstK => "first_k",
            Strategy::MaxResponse => "max_response",
        }))
    }
}

/// Runs the command line against the process's standard streams.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the command line with explicit output streams; returns the exit
/// code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    let result = match cli.command {
        Command::FoldBn(a) => cmd_fold_bn(&a, out, err),
        Command::Prune(a) => cmd_prune(&a, out, err),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Flops(a) => cmd_flops(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn load_model(model: &Path, weights: Option<&Path>) -> Result<Graph> {
    let w = weights.map_or_else(|| sibling_weights(model), Path::to_path_buf);
    load_graph(model, &w)
}

fn probe_input(g: &Graph, seed: u64) -> Activation {
    let s = g.input_shape(1);
    Dataset::synthetic(1, s.c, s.h, s.w, seed).images.remove(0)
}

fn output_of(g: &Graph, x: &Activation) -> Result<Activation> {
    let id = g.output_node().id.clone();
    Ok(forward(g, x, &[])?.remove(&id).expect("output captured"))
}

fn cmd_fold_bn(a: &FoldArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let g = load_model(&a.model, a.weights.as_deref())?;
    let out_weights = a.out_weights.clone().unwrap_or_else(|| sibling_weights(&a.out_model));
    let bn_count = g.nodes().filter(|n| matches!(n.op, Op::BatchNorm(_))).count();
    if bn_count == 0 {
        writeln!(err, "no BN nodes")?;
        save_graph(&g, &a.out_model, &out_weights)?;
        return Ok(());
    }
    let folded = fold_batchnorm(&g)?;
    let x = probe_input(&g, a.seed);
    let before = output_of(&g, &x)?;
    let after = output_of(&folded, &x)?;
    let diff = before
        .data
        .iter()
        .zip(&after.data)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f32, f32::max);
    save_graph(&folded, &a.out_model, &out_weights)?;
    writeln!(out, "folded {bn_count} BN nodes")?;
    writeln!(out, "max_abs_diff {diff:.6e}")?;
    Ok(())
}

fn cmd_prune(a: &PruneArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(v) = &a.model {
        cfg.model = v.clone();
    }
    if let Some(v) = &a.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &a.out_model {
        cfg.out_model = v.clone();
    }
    if let Some(v) = &a.report {
        cfg.report = Some(v.clone());
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.target_speedup {
        cfg.target_speedup = v;
    }
    if let Some(v) = a.strategy {
        cfg.strategy = v;
    }
    if let Some(v) = a.samples_per_image {
        cfg.samples_per_image = v;
    }
    if let Some(v) = a.image_count {
        cfg.image_count = Some(v);
    }
    cfg.check_inputs()?;

    let mut g = load_graph(&cfg.model, &cfg.weights_path())?;
    if g.nodes().any(|n| matches!(n.op, Op::BatchNorm(_))) {
        writeln!(err, "folding BN nodes before pruning")?;
        g = fold_batchnorm(&g)?;
    }
    let ds = load_dataset(&cfg.dataset)?;

    let mut schedule = match &cfg.schedule {
        Some(path) => serde_json::from_slice::<PruneSchedule>(&crate::graph::io_read(path)?)?,
        None => {
            let frozen: BTreeSet<String> = cfg.frozen_layers.iter().cloned().collect();
            make_schedule(
                &g,
                g.input_shape(1),
                cfg.target_speedup,
                cfg.shallow_deep_ratio,
                &frozen,
                cfg.boundary.as_deref(),
            )?
        }
    };
    schedule.per_layer.extend(cfg.overrides.clone());
    if !cfg.overrides.is_empty() {
        schedule.predicted_speedup = Some(crate::pruner::predict_speedup(
            &g,
            g.input_shape(1),
            &schedule.per_layer,
        )?);
    }
    schedule.validate(&g)?;

    let opts = PruneOptions {
        strategy: cfg.strategy,
        sampling: cfg.sampling(),
        residual: cfg.residual,
        exit_mode: cfg.exit_mode,
    };
    let (pruned, mut report) = prune_model(&g, &ds, &schedule, &opts)?;
    report.config = Some(serde_json::to_value(&cfg)?);

    save_graph(&pruned, &cfg.out_model, &cfg.out_weights_path())?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(cfg.report_path(), text)?;

    write!(out, "{}", report.to_table())?;
    writeln!(out, "achieved_speedup {:.6}", report.achieved_speedup)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ga = load_model(&a.model_a, a.weights_a.as_deref())?;
    let gb = load_model(&a.model_b, a.weights_b.as_deref())?;
    let ds = load_dataset(&a.data)?;
    let img = ds.image_shape();
    for g in [&ga, &gb] {
        let s = g.input_shape(1);
        if s != img {
            return Err(Error::Shape {
                node: g.input_node().id.clone(),
                reason: format!("model expects {s}, dataset has {img}"),
            });
        }
    }
    let sa = crate::graph::infer_shapes(&ga, img)?;
    let sb = crate::graph::infer_shapes(&gb, img)?;
    let (oa, ob) = (ga.output_node().id.clone(), gb.output_node().id.clone());
    if sa[&oa] != sb[&ob] {
        return Err(Error::Shape {
            node: ob,
            reason: format!("output {} differs from {}", sb[&gb.output_node().id], sa[&oa]),
        });
    }
    let shared: Vec<String> = ga
        .topo_order()
        .iter()
        .filter(|id| {
            gb.contains(id)
                && sa[*id] == sb[*id]
                && !matches!(ga.node(id).map(|n| &n.op), Ok(Op::Input { .. } | Op::Output))
        })
        .cloned()
        .collect();
    let capture: Vec<&str> = shared.iter().map(String::as_str).collect();

    let mut total = 0.0;
    let mut per_layer = vec![0.0; shared.len()];
    for x in &ds.images {
        let ra = forward(&ga, x, &capture)?;
        let rb = forward(&gb, x, &capture)?;
        total += relative_or_absolute(&rb[&ob].to_matrix(), &ra[&oa].to_matrix())?;
        for (acc, id) in per_layer.iter_mut().zip(&shared) {
            *acc += relative_or_absolute(&rb[id].to_matrix(), &ra[id].to_matrix())?;
        }
    }
    let n = ds.len() as f64;
    writeln!(out, "mean_rel_err {:.5e}", total / n)?;
    for (acc, id) in per_layer.iter().zip(&shared) {
        writeln!(out, "layer {id} {:.5e}", acc / n)?;
    }
    Ok(())
}

fn cmd_flops(a: &FlopsArgs, out: &mut dyn Write) -> Result<()> {
    let shape: TensorShape = a.input_shape.parse()?;
    let (nodes, topo) = read_graph_file(&a.model)?;
    let g = Graph::without_weights(nodes, topo)?;
    let report = count_flops(&g, shape)?;
    write!(out, "{}", report.to_table())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run_with(args.iter().copied(), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn malformed_shape_fails() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.json");
        let mut b = crate::graph::GraphBuilder::new(3, 4, 4, 0);
        b.output("input");
        save_graph(&b.build().unwrap(), &m, &sibling_weights(&m)).unwrap();
        let (code, _, err) = run_args(&["chanprune", "flops", "--model", m.to_str().unwrap(), "--input-shape", "3x32"]);
        assert_eq!(code, 1);
        assert!(err.contains("error"));
        let (code, out, _) = run_args(&["chanprune", "flops", "--model", m.to_str().unwrap(), "--input-shape", "1x3x4x4"]);
        assert_eq!(code, 0);
        assert!(out.lines().last().unwrap().trim_end().ends_with(" 0"));
    }

    #[test]
    fn missing_model_is_reported() {
        let (code, _, err) = run_args(&[
            "chanprune", "fold-bn", "--model", "/no/such.json", "--out-model", "/tmp/x.json",
        ]);
        assert_eq!(code, 1);
        assert!(err.contains("file not found"), "{err}");
    }

    #[test]
    fn config_defaults_and_paths() {
        let cfg: RunConfig = serde_json::from_str(r#"{"model":"a/m.json","out_model":"b/p.json"}"#).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.weights_path(), PathBuf::from("a/m.pkw"));
        assert_eq!(cfg.out_weights_path(), PathBuf::from("b/p.pkw"));
        assert_eq!(cfg.report_path(), PathBuf::from("b/p.report.json"));
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus":1}"#).is_err());
    }
}
