//! Train a small ANet, then score it with the fixed query/gallery protocol and
//! the repeated VehicleID protocol for each feature selector.

use anet::data::{gen_synthetic, split_by_identity, SyntheticSpec};
use anet::eval::{evaluate_fixed, vehicleid_protocol, DEFAULT_REPEATS};
use anet::model::{BackboneConfig, ModelConfig, Selector, Variant};
use anet::train::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let ds = gen_synthetic(&SyntheticSpec {
        id_count: 24,
        images_per_id: 8,
        image_size: 32,
        ..Default::default()
    })?;
    let splits = split_by_identity(&ds, 16)?;
    let model = ModelConfig {
        variant: Variant::Anet,
        image_size: 32,
        backbone: BackboneConfig {
            stem_channels: 8,
            stage_channels: vec![8, 16, 32],
            ..Default::default()
        },
        s_f: 32,
        s_a: 8,
        s_j: 32,
        se_reduction: 4,
        id_classes: 16,
        ..Default::default()
    };
    let cfg = TrainConfig {
        variant: Variant::Anet,
        epochs_total: 6,
        stage1_epochs: 4,
        lr: 1e-3,
        decay_epochs: vec![],
        p: 8,
        k: 4,
        ..Default::default()
    };
    let state = train(&splits.train, &model, &cfg)?.model;
    let held = splits.held_out()?;
    for sel in [Selector::F, Selector::Fa, Selector::J] {
        let fixed = evaluate_fixed(&splits.query, &splits.gallery, &state, sel, true)?;
        let vid = vehicleid_protocol(&held, &state, sel, DEFAULT_REPEATS, 0)?;
        println!(
            "{sel:>2}: fixed mAP {:.3} R1 {:.3} | vehicleid mAP {:.3}+-{:.3} R1 {:.3}+-{:.3}",
            fixed.map,
            fixed.r1,
            vid.map,
            vid.map_std.unwrap_or(0.0),
            vid.r1,
            vid.r1_std.unwrap_or(0.0)
        );
    }
    Ok(())
}
