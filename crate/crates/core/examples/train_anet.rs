//! Two-stage ANet training on a tiny synthetic set, printing one line per epoch.

use anet::data::{gen_synthetic, split_by_identity, SyntheticSpec};
use anet::model::{BackboneConfig, ModelConfig, Variant};
use anet::train::{train_with, TrainConfig};

fn main() -> anyhow::Result<()> {
    let ds = gen_synthetic(&SyntheticSpec {
        id_count: 20,
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
        epochs_total: 8,
        stage1_epochs: 6,
        lr: 1e-3,
        decay_epochs: vec![5],
        p: 8,
        k: 4,
        ..Default::default()
    };
    let mut last_epoch = usize::MAX;
    let out = train_with(&splits.train, &model, &cfg, |s| {
        if s.epoch != last_epoch {
            last_epoch = s.epoch;
            let r = &s.report;
            println!(
                "epoch {:>2} stage {} lr {:.1e} loss {:.4} ac_id {:?}",
                s.epoch, s.stage, s.lr, r.total, r.ac_id
            );
        }
    })?;
    println!("{} steps, stage-1 snapshot kept: {}", out.log.len(), out.stage1_model.is_some());
    Ok(())
}
