//! Folds BatchNorm into the preceding convolutions and checks the outputs.
//!
//! `cargo run --example fold_batchnorm`

use chanprune::graph::fold_batchnorm;
use chanprune::infer::forward;
use chanprune::sampler::Dataset;
use chanprune::zoo;

fn main() -> chanprune::Result<()> {
    for seed in 0..5 {
        let g = zoo::random_bn_graph(seed);
        let folded = fold_batchnorm(&g)?;
        let s = g.input_shape(1);
        let x = &Dataset::synthetic(1, s.c, s.h, s.w, seed).images[0];
        let a = &forward(&g, x, &[])?["output"];
        let b = &forward(&folded, x, &[])?["output"];
        let diff = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        println!(
            "graph {seed}: {} nodes -> {} nodes, max |diff| {diff:.3e}",
            g.len(),
            folded.len()
        );
    }
    Ok(())
}
