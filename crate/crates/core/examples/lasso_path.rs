//! Traces the LASSO path of one channel-selection problem: how many
//! channels survive as λ grows, and the λ found for each budget.
//!
//! `cargo run --example lasso_path`

use chanprune::lasso::{build_channel_design, lasso_cd, search_lambda};
use chanprune::pruner::layer_samples;
use chanprune::zoo;

fn main() -> chanprune::Result<()> {
    let inst = zoo::single_layer_instance(7, 8, 16, 256);
    let g = &inst.graph;
    let s = layer_samples(g, g, &inst.layer, &inst.data, &inst.sampling)?;
    let d = build_channel_design(&s, &g.conv_weight_matrix(&inst.layer)?)?;
    let lmax = d.lambda_max();
    println!("lambda_max = {lmax:.5}");

    println!("{:>10} {:>4}  beta", "lambda", "nnz");
    for step in 0..=10 {
        let lambda = lmax * step as f64 / 10.0;
        let b = lasso_cd(&d, lambda, 1e-9, 100_000)?;
        let beta: Vec<String> = b.beta.iter().map(|v| format!("{v:+.2}")).collect();
        println!("{lambda:>10.5} {:>4}  [{}]", b.nnz, beta.join(" "));
    }

    println!("\nbudget  lambda      kept");
    for budget in 1..=d.channels() {
        let r = search_lambda(&d, budget)?;
        let pad = if r.padded { " (padded)" } else { "" };
        println!("{budget:>6}  {:.6}  {:?}{pad}", r.lambda, r.kept);
    }
    Ok(())
}
