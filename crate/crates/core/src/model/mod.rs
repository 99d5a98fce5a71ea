//! Network definition: partitioned parameter store and the forward pass.
//!
//! Parameters live in a flat, named, partition-tagged list. A forward pass
//! binds every parameter to a fresh [`Tape`] (frozen ones as non-differentiable
//! leaves) and wires the backbone, the re-id head, the attribute branches and
//! the joint module according to the [`Variant`].

pub mod backbone;
pub mod heads;
pub mod joint;

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::norm::{BatchStats, RUNNING_MOMENTUM};
use crate::numerics::{ChannelMode, NormKind, Scalar, Tape, Tensor, Var};

/// Which network and objective is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Backbone and re-id head only, trained with the f losses.
    Baseline,
    /// Backbone, re-id head and attribute branches.
    Van,
    /// Full network with joint module and the two-stage schedule.
    Anet,
    /// Joint module with the attention-style compensation `J = F * CBAM(G) + F`.
    AnetAtt,
    /// Full network trained without the amelioration constraints.
    AnetNoAc,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Van,
        Variant::Anet,
        Variant::AnetAtt,
        Variant::AnetNoAc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Van => "van",
            Variant::Anet => "anet",
            Variant::AnetAtt => "anet_att",
            Variant::AnetNoAc => "anet_no_ac",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }

    pub fn has_attributes(self) -> bool {
        self != Variant::Baseline
    }

    pub fn has_joint(self) -> bool {
        matches!(self, Variant::Anet | Variant::AnetAtt | Variant::AnetNoAc)
    }

    pub fn supports(self, selector: Selector) -> bool {
        match selector {
            Selector::F => true,
            Selector::Fa => self.has_attributes(),
            Selector::J => self.has_joint(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Feature used for retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    F,
    J,
    Fa,
}

impl Selector {
    pub const ALL: [Selector; 3] = [Selector::F, Selector::Fa, Selector::J];

    pub fn name(self) -> &'static str {
        match self {
            Selector::F => "f",
            Selector::J => "j",
            Selector::Fa => "fa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Selector::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown selector '{s}'")))
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Attribute branch flavour: SE channel attention or plain FC on `GAP(F)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Attention,
    Fc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub ibn: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_channels: 16,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            ibn: true,
        }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.stem_channels)
    }

    /// Spatial size of the feature map for a square input.
    pub fn out_size(&self, image_size: usize) -> usize {
        self.stage_channels
            .iter()
            .fold(image_size, |s, _| (s - 1) / 2 + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub s_f: usize,
    pub s_a: usize,
    pub s_j: usize,
    pub se_reduction: usize,
    pub branch: BranchKind,
    pub cbam_kernel: usize,
    pub id_classes: usize,
    pub attr_classes: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Anet,
            image_size: 64,
            backbone: BackboneConfig::default(),
            s_f: 64,
            s_a: 16,
            s_j: 64,
            se_reduction: 16,
            branch: BranchKind::Attention,
            cbam_kernel: 7,
            id_classes: 64,
            attr_classes: vec![6, 4],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bb = &self.backbone;
        if bb.stage_channels.is_empty() || bb.blocks_per_stage == 0 || bb.stem_channels == 0 {
            return Err(Error::Config(
                "backbone needs at least one stage and one block per stage".into(),
            ));
        }
        if bb.ibn {
            for (i, &c) in bb.stage_channels.iter().take(2).enumerate() {
                if c % 2 != 0 {
                    return Err(Error::Config(format!(
                        "IBN stage {i} has odd width {c}; the instance/batch split needs an even count"
                    )));
                }
            }
        }
        if self.backbone.out_size(self.image_size) < 2 {
            return Err(Error::Config(format!(
                "image size {} leaves a feature map smaller than 2 x 2",
                self.image_size
            )));
        }
        if self.s_f == 0 || self.id_classes < 2 {
            return Err(Error::Config("s_f must be positive and id_classes >= 2".into()));
        }
        if self.variant.has_attributes() {
            if self.attr_classes.is_empty() {
                return Err(Error::Config(format!(
                    "variant {} needs at least one attribute",
                    self.variant
                )));
            }
            if self.attr_classes.iter().any(|&m| m < 2) || self.s_a == 0 {
                return Err(Error::Config(
                    "attributes need at least 2 classes and s_a > 0".into(),
                ));
            }
        }
        if self.variant.has_joint() {
            if self.branch == BranchKind::Fc {
                return Err(Error::IncompatibleSelector {
                    selector: "fc attribute branches".into(),
                    variant: self.variant.to_string(),
                });
            }
            if self.s_j == 0 {
                return Err(Error::Config("s_j must be positive".into()));
            }
        }
        if self.variant == Variant::AnetAtt && self.cbam_kernel % 2 == 0 {
            return Err(Error::Config("cbam_kernel must be odd".into()));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be positive".into()));
        }
        Ok(())
    }

    pub fn attributes(&self) -> usize {
        if self.variant.has_attributes() {
            self.attr_classes.len()
        } else {
            0
        }
    }

    /// Width of the retrieval feature for a selector.
    pub fn feature_dim(&self, selector: Selector) -> usize {
        match selector {
            Selector::F => self.s_f,
            Selector::J => self.s_j,
            Selector::Fa => self.s_f + self.attributes() * self.s_a,
        }
    }
}

/// Parameter group, used for freezing and for checkpoint records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Backbone,
    ReidHead,
    AttributeBranches,
    JointModule,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::Backbone,
        Partition::ReidHead,
        Partition::AttributeBranches,
        Partition::JointModule,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Partition::Backbone => "backbone",
            Partition::ReidHead => "reid",
            Partition::AttributeBranches => "attr",
            Partition::JointModule => "joint",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        Partition::ALL.into_iter().find(|p| p.tag() == head)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Non-learned state (running normalization statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

/// All parameters and buffers of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    pub buffers: Vec<Buffer<T>>,
    param_index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

/// Collects parameters during construction.
pub(crate) struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param<f32>>,
    buffers: Vec<Buffer<f32>>,
}

impl Builder {
    fn push(&mut self, name: String, value: Tensor<f32>) {
        let partition = Partition::from_name(&name).expect("parameter names start with a partition tag");
        self.params.push(Param {
            name,
            partition,
            value,
            trainable: true,
        });
    }

    /// He-normal initialised weights.
    pub(crate) fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) {
        self.normal(name, shape, (2.0 / fan_in as f64).sqrt());
    }

    pub(crate) fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng) as f32);
        self.push(name, t);
    }

    pub(crate) fn constant(&mut self, name: String, shape: &[usize], v: f32) {
        self.push(name, Tensor::full(shape, v));
    }

    /// Scale, shift and running statistics of one normalization layer.
    pub(crate) fn norm(&mut self, prefix: &str, channels: usize, kind: NormKind) {
        self.constant(format!("{prefix}.gamma"), &[channels], 1.0);
        self.constant(format!("{prefix}.beta"), &[channels], 0.0);
        let r = kind.running_channels(channels);
        if r > 0 {
            self.buffers.push(Buffer {
                name: format!("{prefix}.running_mean"),
                value: Tensor::zeros(&[r]),
            });
            self.buffers.push(Buffer {
                name: format!("{prefix}.running_var"),
                value: Tensor::full(&[r], 1.0),
            });
        }
    }
}

impl ModelState<f32> {
    /// Freshly initialised network.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            buffers: Vec::new(),
        };
        backbone::build(&mut b, config);
        heads::build(&mut b, config);
        if config.variant.has_joint() {
            joint::build(&mut b, config);
        }
        Ok(ModelState::from_parts(config.clone(), b.params, b.buffers))
    }
}

impl<T: Scalar> ModelState<T> {
    pub fn from_parts(config: ModelConfig, params: Vec<Param<T>>, buffers: Vec<Buffer<T>>) -> Self {
        let param_index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let buffer_index = buffers
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        ModelState {
            config,
            params,
            buffers,
            param_index,
            buffer_index,
        }
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState::from_parts(
            self.config.clone(),
            self.params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    partition: p.partition,
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            self.buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
        )
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.param_index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.param_index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn param_position(&self, name: &str) -> Option<usize> {
        self.param_index.get(name).copied()
    }

    pub fn buffer(&self, name: &str) -> Option<&Buffer<T>> {
        self.buffer_index.get(name).map(|&i| &self.buffers[i])
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Buffer<T>> {
        self.buffer_index.get(name).map(|&i| &mut self.buffers[i])
    }

    pub fn set_trainable(&mut self, partition: Partition, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.partition == partition) {
            p.trainable = trainable;
        }
    }

    pub fn is_trainable(&self, partition: Partition) -> bool {
        self.params
            .iter()
            .filter(|p| p.partition == partition)
            .all(|p| p.trainable)
    }

    pub fn partition_params(&self, partition: Partition) -> impl Iterator<Item = &Param<T>> {
        self.params.iter().filter(move |p| p.partition == partition)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Fold the batch statistics of a training forward pass into the running
    /// statistics: `running = m * running + (1 - m) * batch`.
    pub fn apply_stats(&mut self, updates: &[StatUpdate<T>]) {
        let m = T::of(RUNNING_MOMENTUM);
        let one = T::one();
        for u in updates {
            for (key, batch) in [("running_mean", &u.stats.mean), ("running_var", &u.stats.var)] {
                let name = format!("{}.{key}", u.layer);
                let buf = self
                    .buffer_mut(&name)
                    .unwrap_or_else(|| panic!("no running statistics named {name}"));
                for (r, &b) in buf.value.data_mut().iter_mut().zip(batch.iter()) {
                    *r = m * *r + (one - m) * b;
                }
            }
        }
    }
}

/// Batch statistics recorded by one normalization layer.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub layer: String,
    pub stats: BatchStats<T>,
}

/// Forward-pass context: the tape, bound parameters and collected statistics.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub state: &'a ModelState<T>,
    pub vars: Vec<Var>,
    pub train: bool,
    pub stats: Vec<StatUpdate<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Bind every parameter as a leaf; frozen parameters get no gradient.
    pub fn new(tape: &'a mut Tape<T>, state: &'a ModelState<T>, train: bool) -> Self {
        let vars = state
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.trainable))
            .collect();
        Ctx {
            tape,
            state,
            vars,
            train,
            stats: Vec::new(),
        }
    }

    pub fn p(&self, name: &str) -> Var {
        let i = self
            .state
            .param_position(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    pub fn has(&self, name: &str) -> bool {
        self.state.param_position(name).is_some()
    }

    /// Normalization layer. Runs in training mode only when the context is
    /// training and the layer's parameters are trainable, so a frozen layer
    /// uses (and keeps) its running statistics.
    pub fn norm(&mut self, x: Var, prefix: &str, kind: NormKind) -> Result<Var> {
        let gname = format!("{prefix}.gamma");
        let channels = self.tape.shape(x)[1];
        let modes = kind.channel_modes(channels)?;
        let layer_trainable = self.state.param(&gname).map(|p| p.trainable).unwrap_or(false);
        let train = self.train && layer_trainable;
        let has_batch = modes.contains(&ChannelMode::Batch);
        let running = if !train && has_batch {
            let m = self.state.buffer(&format!("{prefix}.running_mean"));
            let v = self.state.buffer(&format!("{prefix}.running_var"));
            match (m, v) {
                (Some(m), Some(v)) => Some((m.value.data(), v.value.data())),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "layer {prefix} has no running statistics"
                    )))
                }
            }
        } else {
            None
        };
        let (g, b) = (self.p(&gname), self.p(&format!("{prefix}.beta")));
        let (y, stats) = self.tape.normalize(x, g, b, &modes, train, running)?;
        if train && has_batch {
            self.stats.push(StatUpdate {
                layer: prefix.to_string(),
                stats,
            });
        }
        Ok(y)
    }
}

/// Handles of every intermediate the losses and evaluators need.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// Backbone map `F`, `n x c x h x w`.
    pub fmap: Var,
    pub f: Var,
    pub f_logits: Var,
    pub branches: Vec<heads::BranchOut>,
    pub joint: Option<joint::JointOut>,
}

/// Run the network on an `n x 3 x s x s` batch.
pub fn forward<T: Scalar>(ctx: &mut Ctx<'_, T>, images: Var) -> Result<Outputs> {
    let cfg = &ctx.state.config;
    let shape = ctx.tape.shape(images).to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.image_size || shape[3] != cfg.image_size {
        return Err(Error::shape(
            "model input",
            &shape,
            &[0, 3, cfg.image_size, cfg.image_size],
        ));
    }
    let variant = cfg.variant;
    let n_attr = cfg.attributes();
    let fmap = backbone::forward(ctx, images)?;
    let (f, f_logits) = heads::reid(ctx, fmap)?;
    let mut branches = Vec::with_capacity(n_attr);
    for i in 0..n_attr {
        branches.push(heads::attribute(ctx, fmap, i)?);
    }
    let joint = if variant.has_joint() {
        Some(joint::forward(ctx, fmap, &branches)?)
    } else {
        None
    };
    Ok(Outputs {
        fmap,
        f,
        f_logits,
        branches,
        joint,
    })
}

/// Evaluation-mode forward on plain tensors, for feature extraction.
pub fn infer<T: Scalar>(state: &ModelState<T>, images: Tensor<T>) -> Result<(Tape<T>, Outputs)> {
    let mut frozen = state.clone();
    for p in frozen.params.iter_mut() {
        p.trainable = false;
    }
    let mut tape = Tape::new();
    let out = {
        let mut ctx = Ctx::new(&mut tape, &frozen, false);
        let x = ctx.tape.constant(images);
        forward(&mut ctx, x)?
    };
    Ok((tape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            image_size: 16,
            backbone: BackboneConfig {
                stem_channels: 4,
                stage_channels: vec![4, 8],
                blocks_per_stage: 1,
                ibn: true,
            },
            s_f: 6,
            s_a: 3,
            s_j: 6,
            id_classes: 3,
            attr_classes: vec![3, 2],
            ..Default::default()
        }
    }

    #[test]
    fn variant_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("nope").is_err());
        assert!(!Variant::Baseline.supports(Selector::J));
        assert!(!Variant::Baseline.supports(Selector::Fa));
        assert!(Variant::Van.supports(Selector::Fa));
        assert!(!Variant::Van.supports(Selector::J));
    }

    #[test]
    fn partitions_by_variant() {
        let base = ModelState::init(&small(Variant::Baseline), 0).unwrap();
        assert_eq!(base.partition_params(Partition::AttributeBranches).count(), 0);
        assert_eq!(base.partition_params(Partition::JointModule).count(), 0);
        let anet = ModelState::init(&small(Variant::Anet), 0).unwrap();
        assert!(anet.partition_params(Partition::JointModule).count() > 0);
        for p in &anet.params {
            assert_eq!(Partition::from_name(&p.name), Some(p.partition));
        }
    }

    #[test]
    fn fc_branches_rejected_in_anet() {
        let mut c = small(Variant::Anet);
        c.branch = BranchKind::Fc;
        assert!(c.validate().is_err());
        c.variant = Variant::Van;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn odd_ibn_width_rejected() {
        let mut c = small(Variant::Van);
        c.backbone.stage_channels = vec![5, 8];
        assert!(c.validate().is_err());
        c.backbone.ibn = false;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ModelState::init(&small(Variant::Baseline), 0).unwrap();
        let before = s.buffer("backbone.stem.norm.running_mean").unwrap().value.clone();
        let c = before.len();
        s.apply_stats(&[StatUpdate {
            layer: "backbone.stem.norm".into(),
            stats: BatchStats {
                mean: vec![1.0; c],
                var: vec![3.0; c],
            },
        }]);
        let m = s.buffer("backbone.stem.norm.running_mean").unwrap();
        assert!(m.value.data().iter().all(|&v| (v - 0.1).abs() < 1e-7));
        let v = s.buffer("backbone.stem.norm.running_var").unwrap();
        assert!(v.value.data().iter().all(|&v| (v - 1.2).abs() < 1e-6));
    }

    #[test]
    fn forward_shapes() {
        for variant in Variant::ALL {
            let cfg = small(variant);
            let s = ModelState::init(&cfg, 1).unwrap();
            let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 7) % 11) as f32 / 11.0);
            let (tape, out) = infer(&s, x).unwrap();
            assert_eq!(tape.shape(out.fmap), &[2, 8, 4, 4]);
            assert_eq!(tape.shape(out.f), &[2, 6]);
            assert_eq!(tape.shape(out.f_logits), &[2, 3]);
            assert_eq!(out.branches.len(), cfg.attributes());
            assert_eq!(out.joint.is_some(), variant.has_joint());
            if let Some(j) = &out.joint {
                assert_eq!(tape.shape(j.j), &[2, 6]);
            }
        }
    }
}
