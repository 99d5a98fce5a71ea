//! The baseline / VAN / ANet ablation at desk scale, three seeds per variant.
//!
//! Takes a few minutes in release mode. Pass `quick` for a two-epoch smoke run.

use anet::ablation::{ablate, directional_spec};

fn main() -> anyhow::Result<()> {
    let mut spec = directional_spec();
    if std::env::args().nth(1).as_deref() == Some("quick") {
        spec.train.epochs_total = 2;
        spec.train.stage1_epochs = 1;
        spec.train.decay_epochs.clear();
        spec.seeds.truncate(1);
    }
    let table = ablate(&spec)?;
    for c in &table.cells {
        println!("{} seed {}: {:.0}s error {:?}", c.variant, c.seed, c.seconds, c.error);
    }
    println!("{}", table.to_text());
    Ok(())
}
