//! Finite-difference verification of the whole network and its objectives.
//!
//! A micro model (8 x 8 inputs, two identities of two images) is run in 64-bit
//! precision; every trainable parameter is perturbed in turn and the central
//! difference of the objective is compared with the taped gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{compute, BatchLabels, LossWeights, Mining, Objective};
use crate::model::{forward, BackboneConfig, Ctx, ModelConfig, ModelState, Variant};
use crate::numerics::gradcheck::primitive_suite;
use crate::numerics::{grad_check_subset, GradCheckConfig, GradCheckReport, Tensor};
use crate::train::freeze_backbone;

pub const MICRO_IMAGE: usize = 8;

/// Smallest configuration that still exercises every layer kind.
pub fn micro_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        image_size: MICRO_IMAGE,
        backbone: BackboneConfig {
            stem_channels: 2,
            stage_channels: vec![2, 4],
            blocks_per_stage: 1,
            ibn: true,
        },
        s_f: 4,
        s_a: 2,
        s_j: 4,
        se_reduction: 2,
        cbam_kernel: 3,
        id_classes: 2,
        attr_classes: vec![3, 2],
        ..Default::default()
    }
}

/// Two identities with two images each; one colour label is missing.
pub fn micro_batch(seed: u64) -> (Tensor<f64>, BatchLabels) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn(&[4, 3, MICRO_IMAGE, MICRO_IMAGE], |_| rng.gen_range(0.0..1.0));
    let labels = BatchLabels {
        ids: vec![0, 0, 1, 1],
        attrs: vec![
            vec![Some(0), Some(1)],
            vec![None, Some(1)],
            vec![Some(2), Some(0)],
            vec![Some(2), Some(0)],
        ],
    };
    (images, labels)
}

/// Check one objective of one variant. With `second_stage` the backbone and
/// re-id head are frozen and only the remaining parameters are perturbed.
pub fn composed_check(
    name: &str,
    variant: Variant,
    objective: Objective,
    second_stage: bool,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut state: ModelState<f64> = ModelState::init(&micro_config(variant), seed)?.cast();
    if second_stage {
        let mut f32_state = ModelState::init(&micro_config(variant), seed)?;
        freeze_backbone(&mut f32_state);
        for (p, q) in state.params.iter_mut().zip(&f32_state.params) {
            p.trainable = q.trainable;
        }
    }
    let (images, labels) = micro_batch(seed ^ 0x5eed);
    let inputs: Vec<Tensor<f64>> = state.params.iter().map(|p| p.value.clone()).collect();
    let perturb: Vec<bool> = state.params.iter().map(|p| p.trainable).collect();
    let weights = LossWeights::default();
    grad_check_subset(
        name,
        |tape, vars| {
            let mut ctx = Ctx {
                tape,
                state: &state,
                vars: vars.to_vec(),
                train: true,
                stats: Vec::new(),
            };
            let x = ctx.tape.constant(images.clone());
            let out = forward(&mut ctx, x)?;
            let (total, _) = compute(
                ctx.tape,
                &out,
                &labels,
                &weights,
                objective,
                Mining::JSpace,
                second_stage,
            )?;
            Ok(total)
        },
        &inputs,
        &perturb,
        GradCheckConfig::composed(),
    )
}

/// Full network under every objective of the training schedule.
pub fn composed_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let cases = [
        ("baseline f losses", Variant::Baseline, Objective::Baseline, false),
        ("van L_VAN", Variant::Van, Objective::Van, false),
        ("anet stage 1 L", Variant::Anet, Objective::L, false),
        ("anet stage 2 L'", Variant::Anet, Objective::LPrime, true),
        ("anet_att stage 2 L'", Variant::AnetAtt, Objective::LPrime, true),
    ];
    cases
        .iter()
        .map(|&(name, v, o, s2)| composed_check(name, v, o, s2, seed))
        .collect()
}

/// Every primitive operation.
pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    primitive_suite(seed)
}
