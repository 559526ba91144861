//! Prunes a bottleneck block after its input has drifted, once with the
//! exit conv fit to its own original output and once fit so the block sum
//! matches the original.
//!
//! `cargo run --release --example residual_block`

use chanprune::pruner::{
    branch_keep_ratios, find_residual_blocks, prune_layer, prune_residual_block, ExitMode, SamplingConfig,
    Strategy,
};
use chanprune::sampler::Dataset;
use chanprune::zoo;

fn main() -> chanprune::Result<()> {
    let g = zoo::residual_block_graph(3);
    let ds = Dataset::synthetic(128, 3, 8, 8, 4);
    let cfg = SamplingConfig {
        samples_per_image: 64,
        ..Default::default()
    };
    let width = g.conv_attrs("stem2")?.in_channels;
    let (stem, current) = prune_layer(&g, &g, "stem2", width / 2, Strategy::Lasso, &ds, &cfg)?;
    println!("stem2 pruned to {} channels, rel_err {:.4}", stem.kept.len(), stem.rel_err);

    let block = find_residual_blocks(&current)?.remove(0);
    let budgets: Vec<usize> = block
        .branch
        .iter()
        .zip(branch_keep_ratios(0.3))
        .map(|(id, r)| {
            let c = current.conv_attrs(id).unwrap().in_channels;
            ((r * c as f64).round() as usize).clamp(1, c)
        })
        .collect();
    println!("branch {:?}, budgets {budgets:?}", block.branch);

    for mode in [ExitMode::Naive, ExitMode::Corrected] {
        let (_, layers, report) =
            prune_residual_block(&current, &g, &block, &budgets, Strategy::Lasso, &ds, &cfg, mode)?;
        let removals: Vec<String> = layers.iter().map(|l| format!("{:?}", l.removal)).collect();
        println!(
            "{mode:?}: block rel_err {:.4}, removals {}",
            report.block_rel_err,
            removals.join("/")
        );
    }
    Ok(())
}
