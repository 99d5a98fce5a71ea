//! Run configuration in a flat `key = value` text format.
//!
//! Keys are dotted (`train.lr = 0.0006`). A `[section]` line prefixes the keys
//! that follow it, `#` starts a comment, lists are comma separated and strings
//! may be quoted. [`RunConfig::to_text`] writes every key, so a run directory
//! always holds the fully resolved configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::losses::{LossWeights, Mining};
use crate::model::{BackboneConfig, BranchKind, ModelConfig, Selector, Variant};
use crate::train::TrainConfig;

/// Identities held out of training in the synthetic split.
pub const DEFAULT_TRAIN_IDS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub selector: Selector,
    pub protocol: Protocol,
    pub repeats: usize,
    pub seed: u64,
    pub cross_camera_filter: bool,
    /// Ablation scoring: every held-out image queries all the others.
    pub all_vs_all: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            selector: Selector::J,
            protocol: Protocol::Fixed,
            repeats: crate::eval::DEFAULT_REPEATS,
            seed: 0,
            cross_camera_filter: true,
            all_vs_all: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub train_ids: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            data: SyntheticSpec::default(),
            train_ids: DEFAULT_TRAIN_IDS,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        };
        c.sync();
        c
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, value)?.as_slice() {
        &[lo, hi] if lo <= hi => Ok((lo, hi)),
        _ => Err(Error::Config(format!("{key}: expected 'low, high', got '{value}'"))),
    }
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

impl RunConfig {
    /// Derive the fields that follow from others: variant, class counts and
    /// image size are shared between sections.
    pub fn sync(&mut self) {
        self.train.variant = self.model.variant;
        self.model.image_size = self.data.image_size;
        self.model.id_classes = self.train_ids;
        self.model.attr_classes = vec![self.data.color_classes, self.data.type_classes];
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train_ids < 2 || self.train_ids >= self.data.id_count {
            return Err(Error::Config(format!(
                "train_ids must lie in [2, {}), got {}",
                self.data.id_count, self.train_ids
            )));
        }
        if !self.model.variant.supports(self.eval.selector) {
            return Err(Error::IncompatibleSelector {
                selector: self.eval.selector.name().into(),
                variant: self.model.variant.name().into(),
            });
        }
        Ok(())
    }

    /// Set one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = unquote(value);
        let (d, m, t, e) = (&mut self.data, &mut self.model, &mut self.train, &mut self.eval);
        match key {
            "variant" => m.variant = Variant::parse(v)?,
            "data.ids" => d.id_count = parse(key, v)?,
            "data.per_id" => d.images_per_id = parse(key, v)?,
            "data.image_size" => d.image_size = parse(key, v)?,
            "data.colors" => d.color_classes = parse(key, v)?,
            "data.types" => d.type_classes = parse(key, v)?,
            "data.cameras" => d.cameras = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "data.train_ids" => self.train_ids = parse(key, v)?,
            "model.stem_channels" => m.backbone.stem_channels = parse(key, v)?,
            "model.stage_channels" => m.backbone.stage_channels = parse_list(key, v)?,
            "model.blocks_per_stage" => m.backbone.blocks_per_stage = parse(key, v)?,
            "model.ibn" => m.backbone.ibn = parse_bool(key, v)?,
            "model.s_f" => m.s_f = parse(key, v)?,
            "model.s_a" => m.s_a = parse(key, v)?,
            "model.s_j" => m.s_j = parse(key, v)?,
            "model.se_reduction" => m.se_reduction = parse(key, v)?,
            "model.branch" => {
                m.branch = match v {
                    "attention" => BranchKind::Attention,
                    "fc" => BranchKind::Fc,
                    _ => return Err(Error::Config(format!("{key}: expected attention or fc"))),
                }
            }
            "model.cbam_kernel" => m.cbam_kernel = parse(key, v)?,
            "train.epochs" => t.epochs_total = parse(key, v)?,
            "train.stage1_epochs" => t.stage1_epochs = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.decay_factor" => t.decay_factor = parse(key, v)?,
            "train.decay_epochs" => t.decay_epochs = parse_list(key, v)?,
            "train.p" => t.p = parse(key, v)?,
            "train.k" => t.k = parse(key, v)?,
            "train.batches_per_epoch" => {
                t.batches_per_epoch = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "train.seed" => t.seed = parse(key, v)?,
            "train.mining" => {
                t.mining = match v {
                    "j" => Mining::JSpace,
                    "f" => Mining::FSpace,
                    _ => return Err(Error::Config(format!("{key}: expected j or f"))),
                }
            }
            "train.no_ac_two_stage" => t.no_ac_two_stage = parse_bool(key, v)?,
            "augment.enabled" => t.augment.enabled = parse_bool(key, v)?,
            "augment.flip_p" => t.augment.flip_p = parse(key, v)?,
            "augment.zoom" => t.augment.zoom = parse_range(key, v)?,
            "augment.erase_p" => t.augment.erase_p = parse(key, v)?,
            "augment.erase_area" => t.augment.erase_area = parse_range(key, v)?,
            "augment.erase_aspect" => t.augment.erase_aspect = parse_range(key, v)?,
            "loss.lambda_a" => t.weights.lambda_a = parse(key, v)?,
            "loss.lambda_g" => t.weights.lambda_g = parse(key, v)?,
            "loss.lambda" => t.weights.lambda = parse(key, v)?,
            "loss.margin" => t.weights.margin = parse(key, v)?,
            "loss.smoothing" => t.weights.smoothing = parse(key, v)?,
            "eval.selector" => e.selector = Selector::parse(v)?,
            "eval.protocol" => e.protocol = Protocol::parse(v)?,
            "eval.repeats" => e.repeats = parse(key, v)?,
            "eval.seed" => e.seed = parse(key, v)?,
            "eval.cross_camera_filter" => e.cross_camera_filter = parse_bool(key, v)?,
            "eval.all_vs_all" => e.all_vs_all = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        self.sync();
        Ok(())
    }

    /// Apply a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::Config(format!("line {}: {e}", i + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(Error::Config(format!("expected 'key = value', got '{line}'"))))?;
            let k = k.trim();
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            self.set(&key, v).map_err(at)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let (d, m, t, e) = (&self.data, &self.model, &self.train, &self.eval);
        let bb: &BackboneConfig = &m.backbone;
        let a: &AugmentPolicy = &t.augment;
        let w: &LossWeights = &t.weights;
        let range = |r: (f64, f64)| format!("{}, {}", r.0, r.1);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("variant", m.variant.name().into());
        put("data.ids", d.id_count.to_string());
        put("data.per_id", d.images_per_id.to_string());
        put("data.image_size", d.image_size.to_string());
        put("data.colors", d.color_classes.to_string());
        put("data.types", d.type_classes.to_string());
        put("data.cameras", d.cameras.to_string());
        put("data.seed", d.seed.to_string());
        put("data.train_ids", self.train_ids.to_string());
        put("model.stem_channels", bb.stem_channels.to_string());
        put("model.stage_channels", list(&bb.stage_channels));
        put("model.blocks_per_stage", bb.blocks_per_stage.to_string());
        put("model.ibn", bb.ibn.to_string());
        put("model.s_f", m.s_f.to_string());
        put("model.s_a", m.s_a.to_string());
        put("model.s_j", m.s_j.to_string());
        put("model.se_reduction", m.se_reduction.to_string());
        put(
            "model.branch",
            match m.branch {
                BranchKind::Attention => "attention",
                BranchKind::Fc => "fc",
            }
            .into(),
        );
        put("model.cbam_kernel", m.cbam_kernel.to_string());
        put("train.epochs", t.epochs_total.to_string());
        put("train.stage1_epochs", t.stage1_epochs.to_string());
        put("train.lr", t.lr.to_string());
        put("train.decay_factor", t.decay_factor.to_string());
        put("train.decay_epochs", list(&t.decay_epochs));
        put("train.p", t.p.to_string());
        put("train.k", t.k.to_string());
        put(
            "train.batches_per_epoch",
            t.batches_per_epoch.map_or("auto".into(), |b| b.to_string()),
        );
        put("train.seed", t.seed.to_string());
        put(
            "train.mining",
            match t.mining {
                Mining::JSpace => "j",
                Mining::FSpace => "f",
            }
            .into(),
        );
        put("train.no_ac_two_stage", t.no_ac_two_stage.to_string());
        put("augment.enabled", a.enabled.to_string());
        put("augment.flip_p", a.flip_p.to_string());
        put("augment.zoom", range(a.zoom));
        put("augment.erase_p", a.erase_p.to_string());
        put("augment.erase_area", range(a.erase_area));
        put("augment.erase_aspect", range(a.erase_aspect));
        put("loss.lambda_a", w.lambda_a.to_string());
        put("loss.lambda_g", w.lambda_g.to_string());
        put("loss.lambda", w.lambda.to_string());
        put("loss.margin", w.margin.to_string());
        put("loss.smoothing", w.smoothing.to_string());
        put("eval.selector", e.selector.name().into());
        put(
            "eval.protocol",
            match e.protocol {
                Protocol::Fixed => "fixed",
                Protocol::VehicleIdRepeat => "vehicleid",
            }
            .into(),
        );
        put("eval.repeats", e.repeats.to_string());
        put("eval.seed", e.seed.to_string());
        put("eval.cross_camera_filter", e.cross_camera_filter.to_string());
        put("eval.all_vs_all", e.all_vs_all.to_string());
        s
    }
}
