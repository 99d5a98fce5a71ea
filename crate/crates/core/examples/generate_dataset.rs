//! Render a small synthetic vehicle dataset and write its splits to disk.
//!
//! `cargo run --release --example generate_dataset -- /tmp/anet-data`

use std::path::PathBuf;

use anet::data::{gen_synthetic, split_by_identity, write_splits, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("anet-data"));
    let spec = SyntheticSpec {
        id_count: 20,
        images_per_id: 6,
        image_size: 32,
        ..Default::default()
    };
    let ds = gen_synthetic(&spec)?;
    let splits = split_by_identity(&ds, 16)?;
    write_splits(&splits, &out)?;
    println!(
        "{} images: train {}, query {}, gallery {} -> {}",
        ds.len(),
        splits.train.len(),
        splits.query.len(),
        splits.gallery.len(),
        out.display()
    );
    let s = &ds.samples[0];
    println!("first sample: id {} camera {} attributes {:?}", s.identity, s.camera, s.attributes);
    Ok(())
}
