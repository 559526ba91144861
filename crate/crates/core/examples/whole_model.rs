//! Plans a FLOP-targeted schedule for a small CNN, prunes it layer by layer
//! and reports per-layer error plus the achieved speed-up.
//!
//! `cargo run --release --example whole_model [target]`

use std::collections::BTreeSet;

use chanprune::infer::forward;
use chanprune::pruner::{make_schedule, prune_model, relative_or_absolute, PruneOptions};
use chanprune::sampler::Dataset;
use chanprune::zoo;

fn main() -> chanprune::Result<()> {
    let target: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2.0);
    let g = zoo::plain_cnn(0);
    let ds = Dataset::synthetic(200, 3, 16, 16, 1);
    let schedule = make_schedule(&g, g.input_shape(1), target, 1.0, &BTreeSet::new(), None)?;
    for (id, k) in &schedule.per_layer {
        println!("{id}: keep {k} of {}", g.conv_attrs(id)?.in_channels);
    }

    let (pruned, report) = prune_model(&g, &ds, &schedule, &PruneOptions::default())?;
    print!("{}", report.to_table());

    let test = Dataset::synthetic(50, 3, 16, 16, 2);
    let mut err = 0.0;
    for x in &test.images {
        let a = forward(&g, x, &[])?["output"].to_matrix();
        let b = forward(&pruned, x, &[])?["output"].to_matrix();
        err += relative_or_absolute(&b, &a)?;
    }
    println!("mean output rel_err on fresh inputs: {:.4}", err / test.len() as f64);
    Ok(())
}
