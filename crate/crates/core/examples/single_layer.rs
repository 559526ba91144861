//! Prunes one layer to half its input channels with each selection
//! strategy and compares held-out reconstruction error.
//!
//! `cargo run --example single_layer`

use chanprune::pruner::{prune_layer, Strategy};
use chanprune::zoo;

fn main() -> chanprune::Result<()> {
    let trials = 20;
    let strategies = [Strategy::Lasso, Strategy::FirstK, Strategy::MaxResponse];
    let mut totals = [0.0; 3];
    for seed in 0..trials {
        let inst = zoo::single_layer_instance(seed, 8, 16, 256);
        let g = &inst.graph;
        for (t, &strategy) in totals.iter_mut().zip(&strategies) {
            let (r, _) = prune_layer(g, g, &inst.layer, 4, strategy, &inst.data, &inst.sampling)?;
            *t += r.rel_err;
            if seed == 0 {
                println!("{:>12}: kept {:?}, rel_err {:.4}", strategy.to_string(), r.kept, r.rel_err);
            }
        }
    }
    println!("mean over {trials} layers:");
    for (t, s) in totals.iter().zip(&strategies) {
        println!("{:>12}: {:.4}", s.to_string(), t / trials as f64);
    }
    Ok(())
}
