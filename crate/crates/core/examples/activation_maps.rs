//! Export the channel-mean `G` and `G_reid` maps of a few images as PGM files.

use std::path::PathBuf;

use anet::data::{gen_synthetic, SyntheticSpec};
use anet::eval::export_activation_maps;
use anet::model::{BackboneConfig, ModelConfig, ModelState, Variant};

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("anet-maps"));
    let ds = gen_synthetic(&SyntheticSpec {
        id_count: 2,
        images_per_id: 2,
        image_size: 32,
        ..Default::default()
    })?;
    let cfg = ModelConfig {
        variant: Variant::Anet,
        image_size: 32,
        backbone: BackboneConfig {
            stem_channels: 8,
            stage_channels: vec![8, 16, 32],
            ..Default::default()
        },
        id_classes: 2,
        ..Default::default()
    };
    let state = ModelState::init(&cfg, 0)?;
    let images: Vec<_> = ds.samples.iter().map(|s| s.image.clone()).collect();
    for p in export_activation_maps(&state, &images, &out)? {
        println!("{}", p.display());
    }
    Ok(())
}
