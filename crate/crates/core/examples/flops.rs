//! Per-layer FLOP table for VGG-16 and the schedules that hit ×2 and ×4.
//!
//! `cargo run --release --example flops`

use std::collections::BTreeSet;

use chanprune::infer::{count_flops, speedup_ratio};
use chanprune::pruner::{apply_schedule_unfitted, make_schedule};
use chanprune::zoo;

fn main() -> chanprune::Result<()> {
    let g = zoo::vgg16(0);
    let input = g.input_shape(1);
    let before = count_flops(&g, input)?;
    print!("{}", before.to_table());

    let frozen: BTreeSet<String> = zoo::vgg16_final_stage().into_iter().collect();
    for target in [2.0, 4.0] {
        let s = make_schedule(&g, input, target, 1.0 / 1.5, &frozen, Some(zoo::VGG16_BOUNDARY))?;
        let pruned = apply_schedule_unfitted(&g, &s)?;
        let after = count_flops(&pruned, input)?;
        let widths: Vec<String> = s.per_layer.iter().map(|(id, k)| format!("{id}:{k}")).collect();
        println!(
            "\ntarget x{target}: measured x{:.3}\n  {}",
            speedup_ratio(&before, &after)?,
            widths.join(" ")
        );
    }
    Ok(())
}
