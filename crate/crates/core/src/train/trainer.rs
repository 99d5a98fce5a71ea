//! Two-stage training loop.
//!
//! Stage 1 minimizes the variant's base objective over PK batches. For the
//! joint-module variants a second stage starts at `stage1_epochs`: the backbone
//! and the re-id head are frozen (their normalization layers switch to running
//! statistics), the f losses are dropped and the amelioration constraints
//! join the objective.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::amsgrad::Amsgrad;
use super::checkpoint::{config_digest, Checkpoint};
use super::schedule::lr_at;
use crate::data::{augment, pk_sample, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, BatchLabels, LossReport, LossWeights, Mining, Objective};
use crate::model::{forward, Ctx, ModelConfig, ModelState, Partition, Variant};
use crate::numerics::{Tape, Tensor};

/// RNG stream used by the training loop; stream 0 initialises the weights.
const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs_total: usize,
    pub stage1_epochs: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub weights: LossWeights,
    pub mining: Mining,
    /// Give the no-AC variant a second stage (frozen trunk, no f losses).
    pub no_ac_two_stage: bool,
    pub p: usize,
    pub k: usize,
    /// Batches per epoch; `None` means `ceil(samples / (p k))`.
    pub batches_per_epoch: Option<usize>,
    /// Augmentation; the fill colour is replaced by the training-set mean.
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Anet,
            epochs_total: 210,
            stage1_epochs: 150,
            lr: 6e-4,
            decay_factor: 0.1,
            decay_epochs: vec![60, 120, 150],
            weights: LossWeights::default(),
            mining: Mining::JSpace,
            no_ac_two_stage: false,
            p: 4,
            k: 4,
            batches_per_epoch: None,
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs > self.epochs_total {
            return Err(Error::Config(format!(
                "stage1_epochs {} exceeds epochs_total {}",
                self.stage1_epochs, self.epochs_total
            )));
        }
        if self.p < 2 || self.k == 0 {
            return Err(Error::Config(
                "PK batches need p >= 2 identities and k >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("lr and decay_factor must be positive".into()));
        }
        let w = &self.weights;
        if [w.lambda_a, w.lambda_g, w.lambda, w.margin, w.smoothing]
            .iter()
            .any(|v| !(*v >= 0.0))
            || w.smoothing >= 1.0
        {
            return Err(Error::Config(
                "loss weights must be non-negative and smoothing below 1".into(),
            ));
        }
        Ok(())
    }

    /// Whether training switches to the second stage at `stage1_epochs`.
    pub fn two_stage(&self) -> bool {
        let eligible = match self.variant {
            Variant::Anet | Variant::AnetAtt => true,
            Variant::AnetNoAc => self.no_ac_two_stage,
            Variant::Baseline | Variant::Van => false,
        };
        eligible && self.stage1_epochs < self.epochs_total
    }

    pub fn in_stage2(&self, epoch: usize) -> bool {
        self.two_stage() && epoch >= self.stage1_epochs
    }

    pub fn objective(&self, epoch: usize) -> Objective {
        match self.variant {
            Variant::Baseline => Objective::Baseline,
            Variant::Van => Objective::Van,
            Variant::Anet | Variant::AnetAtt if self.in_stage2(epoch) => Objective::LPrime,
            Variant::AnetNoAc if self.in_stage2(epoch) => Objective::LPrimeNoAc,
            _ => Objective::L,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr, self.decay_factor, &self.decay_epochs, epoch)
    }
}

/// One optimisation step of the loss stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub report: LossReport,
}

/// Freeze everything that produces `f`: the trunk and the re-id head.
pub fn freeze_backbone(state: &mut ModelState) {
    state.set_trainable(Partition::Backbone, false);
    state.set_trainable(Partition::ReidHead, false);
}

pub struct Trainer<'a> {
    data: &'a Dataset,
    pub model: ModelState,
    pub opt: Amsgrad,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
    labels: BTreeMap<usize, usize>,
    policy: AugmentPolicy,
    digest: String,
}

impl<'a> Trainer<'a> {
    /// Fresh model initialised from `cfg.seed`.
    pub fn new(data: &'a Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let model = ModelState::init(model_cfg, cfg.seed)?;
        Self::with_model(data, model, cfg)
    }

    pub fn with_model(data: &'a Dataset, model: ModelState, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = &model.config;
        if mc.variant != cfg.variant {
            return Err(Error::Config(format!(
                "model variant {} differs from training variant {}",
                mc.variant, cfg.variant
            )));
        }
        match data.image_shape() {
            Some([3, h, w]) if *h == mc.image_size && *w == mc.image_size => {}
            other => {
                return Err(Error::Config(format!(
                    "training images {other:?} do not match model input 3 x {0} x {0}",
                    mc.image_size
                )))
            }
        }
        if data.meta.id_count < cfg.p {
            return Err(Error::Config(format!(
                "{} identities cannot fill P = {}",
                data.meta.id_count, cfg.p
            )));
        }
        if data.meta.id_count > mc.id_classes {
            return Err(Error::Config(format!(
                "{} identities but the classifier has {} classes",
                data.meta.id_count, mc.id_classes
            )));
        }
        if mc.variant.has_attributes() && data.meta.schema.classes != mc.attr_classes {
            return Err(Error::Config(format!(
                "dataset attribute classes {:?} differ from model {:?}",
                data.meta.schema.classes, mc.attr_classes
            )));
        }
        let digest = config_digest(&serde_json::to_string(&(mc, cfg))?);
        let mut policy = cfg.augment.clone();
        policy.fill = data.channel_means();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        let opt = Amsgrad::new(model.params.len());
        Ok(Trainer {
            data,
            model,
            opt,
            cfg: cfg.clone(),
            rng,
            epoch: 0,
            labels: data.label_map(),
            policy,
            digest,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        data: &'a Dataset,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        ck: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(data, model_cfg, cfg)?;
        t.restore(ck)?;
        Ok(t)
    }

    /// Load weights, optimizer moments, epoch and RNG position from `ck`,
    /// whose digest must match this trainer's.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.check_digest(&self.digest)?;
        ck.restore(&mut self.model, Some(&mut self.opt))?;
        self.epoch = ck.epoch as usize;
        self.rng = ChaCha8Rng::seed_from_u64(ck.rng_seed);
        self.rng.set_stream(TRAIN_STREAM);
        self.rng.set_word_pos(ck.rng_word_pos);
        if self.cfg.in_stage2(self.epoch) {
            freeze_backbone(&mut self.model);
        }
        Ok(())
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Replace the configuration digest recorded in checkpoints.
    pub fn set_digest(&mut self, digest: String) {
        self.digest = digest;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs_total
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            &self.opt,
            &self.digest,
            self.epoch as u32,
            self.cfg.seed,
            self.rng.get_word_pos(),
        )
    }

    fn batches(&self) -> usize {
        self.cfg.batches_per_epoch.unwrap_or_else(|| {
            crate::data::batches_per_epoch(self.data.len(), self.cfg.p, self.cfg.k)
        })
    }

    /// Draw a PK batch, augment it and collect its labels.
    fn next_batch(&mut self) -> Result<(Tensor<f32>, BatchLabels)> {
        let batch = pk_sample(self.data, self.cfg.p, self.cfg.k, &mut self.rng)?;
        let mut images = Vec::with_capacity(batch.len());
        let mut ids = Vec::with_capacity(batch.len());
        let mut attrs = Vec::with_capacity(batch.len());
        for &i in &batch.indices {
            let s = augment(&self.data.samples[i], &mut self.rng, &self.policy);
            ids.push(self.labels[&s.identity]);
            attrs.push(s.attributes);
            images.push(s.image);
        }
        Ok((Tensor::stack(&images), BatchLabels { ids, attrs }))
    }

    /// One optimisation step on a fresh batch.
    pub fn step(&mut self) -> Result<StepLog> {
        let epoch = self.epoch;
        let stage2 = self.cfg.in_stage2(epoch);
        let objective = self.cfg.objective(epoch);
        let lr = self.cfg.lr_at(epoch);
        let (images, labels) = self.next_batch()?;

        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.model, true);
        let x = ctx.tape.constant(images);
        let out = forward(&mut ctx, x)?;
        let (total, report) = losses::compute(
            ctx.tape,
            &out,
            &labels,
            &self.cfg.weights,
            objective,
            self.cfg.mining,
            stage2,
        )?;
        if !report.total.is_finite() {
            return Err(Error::Degenerate(format!(
                "non-finite loss at epoch {epoch}, step {}",
                self.opt.step + 1
            )));
        }
        let Ctx { vars, stats, .. } = ctx;
        let mut grads = tape.backward(total);
        let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
        self.model.apply_stats(&stats);
        self.opt.step(&mut self.model.params, &grads, lr);
        Ok(StepLog {
            epoch,
            step: self.opt.step,
            stage: if stage2 { 2 } else { 1 },
            lr,
            report,
        })
    }

    /// Train one epoch, entering the second stage first when due.
    pub fn run_epoch(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        if self.cfg.in_stage2(self.epoch) {
            freeze_backbone(&mut self.model);
        }
        let mut logs = Vec::with_capacity(self.batches());
        for _ in 0..self.batches() {
            let log = self.step()?;
            on_step(&log);
            logs.push(log);
        }
        self.epoch += 1;
        Ok(logs)
    }
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub log: Vec<StepLog>,
    /// Model at the end of stage 1 when a second stage ran.
    pub stage1_model: Option<ModelState>,
    pub checkpoint: Checkpoint,
}

/// Train from scratch for `cfg.epochs_total` epochs.
pub fn train(data: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, model_cfg, cfg, |_| {})
}

/// [`train`] with a per-step callback.
pub fn train_with(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(data, model_cfg, cfg)?;
    let mut log = Vec::new();
    let mut stage1_model = None;
    while !t.finished() {
        if cfg.two_stage() && t.epoch() == cfg.stage1_epochs {
            stage1_model = Some(t.model.clone());
        }
        log.extend(t.run_epoch(&mut on_step)?);
    }
    let checkpoint = t.checkpoint();
    Ok(TrainOutcome {
        model: t.model,
        log,
        stage1_model,
        checkpoint,
    })
}
