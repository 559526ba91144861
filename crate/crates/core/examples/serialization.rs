//! Saves a model and a dataset, reloads them and checks bit equality.
//!
//! `cargo run --example serialization [dir]`

use std::path::PathBuf;

use chanprune::graph::{load_graph, save_graph};
use chanprune::sampler::{load_dataset, save_dataset, Dataset};
use chanprune::zoo;

fn main() -> chanprune::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let (gp, wp, dp) = (dir.join("resnet.json"), dir.join("resnet.pkw"), dir.join("inputs.pkt"));

    let g = zoo::residual_net(0, 2);
    save_graph(&g, &gp, &wp)?;
    let back = load_graph(&gp, &wp)?;
    let same = g.weights().iter().all(|(k, t)| {
        let u = &back.weights()[k];
        u.dims == t.dims && u.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    println!("{} ({} bytes), {} ({} bytes)", gp.display(), std::fs::metadata(&gp)?.len(), wp.display(), std::fs::metadata(&wp)?.len());
    println!("graph round trip bit-exact: {same}");

    let ds = Dataset::synthetic(16, 3, 8, 8, 1);
    save_dataset(&ds, &dp)?;
    let ds2 = load_dataset(&dp)?;
    println!("dataset round trip: {} images, equal: {}", ds2.len(), ds2.images == ds.images);
    Ok(())
}
