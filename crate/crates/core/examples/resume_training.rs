//! Interrupt a run after two epochs, save a checkpoint, resume from it and
//! confirm the result matches an uninterrupted run byte for byte.

use anet::data::{gen_synthetic, SyntheticSpec};
use anet::model::{BackboneConfig, ModelConfig, Variant};
use anet::train::{train, Checkpoint, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let ds = gen_synthetic(&SyntheticSpec {
        id_count: 8,
        images_per_id: 4,
        image_size: 16,
        ..Default::default()
    })?;
    let model = ModelConfig {
        variant: Variant::Anet,
        image_size: 16,
        backbone: BackboneConfig {
            stem_channels: 4,
            stage_channels: vec![4, 8],
            ..Default::default()
        },
        s_f: 8,
        s_a: 4,
        s_j: 8,
        se_reduction: 2,
        cbam_kernel: 3,
        id_classes: 8,
        ..Default::default()
    };
    let cfg = TrainConfig {
        variant: Variant::Anet,
        epochs_total: 4,
        stage1_epochs: 3,
        decay_epochs: vec![2],
        p: 4,
        k: 2,
        batches_per_epoch: Some(2),
        ..Default::default()
    };
    let full = train(&ds, &model, &cfg)?.checkpoint.to_bytes();

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("run.anet");
    let mut t = Trainer::new(&ds, &model, &cfg)?;
    for _ in 0..2 {
        t.run_epoch(|_| {})?;
    }
    t.checkpoint().save(&path)?;
    drop(t);

    let mut t = Trainer::resume(&ds, &model, &cfg, &Checkpoint::load(&path)?)?;
    println!("resumed at epoch {}", t.epoch());
    while !t.finished() {
        t.run_epoch(|s| println!("epoch {} step {} loss {:.4}", s.epoch, s.step, s.report.total))?;
    }
    let resumed = t.checkpoint().to_bytes();
    println!("checkpoints identical: {}", resumed == full);
    Ok(())
}

