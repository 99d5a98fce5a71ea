//! Variant-by-seed ablation on a synthetic dataset.
//!
//! Every cell trains one variant with one seed, then scores every selector the
//! variant supports on the held-out query/gallery split. Rows follow the
//! usual table layout (`baseline f`, `van f`, `van fa`, ...) and carry the
//! median over seeds.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, split_by_identity, Splits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::evaluate_fixed;
use crate::model::{BackboneConfig, ModelConfig, Selector, Variant};
use crate::train::{train_with, StepLog, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub data: SyntheticSpec,
    pub train_ids: usize,
    /// Model template; `variant` and `id_classes` are set per cell.
    pub model: ModelConfig,
    /// Training template; `variant` and `seed` are set per cell.
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub cross_camera_filter: bool,
    /// Score every held-out image against all others instead of the fixed
    /// query/gallery split. The query itself and its same-camera matches are
    /// always removed from its list.
    pub all_vs_all: bool,
}

impl AblationSpec {
    /// Configuration of one cell.
    pub fn cell_configs(&self, variant: Variant, seed: u64) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            variant,
            image_size: self.data.image_size,
            id_classes: self.train_ids,
            attr_classes: vec![self.data.color_classes, self.data.type_classes],
            ..self.model.clone()
        };
        let train = TrainConfig {
            variant,
            seed,
            ..self.train.clone()
        };
        (model, train)
    }

    pub fn splits(&self) -> Result<Splits> {
        split_by_identity(&gen_synthetic(&self.data)?, self.train_ids)
    }
}

/// Desk-scale ablation: 80 synthetic identities at 32x32 (64 for training),
/// a three-stage toy backbone, 40 epochs with the joint module trained alone
/// for the last 10, and seeds 0, 1 and 2 over baseline, VAN and ANet.
pub fn directional_spec() -> AblationSpec {
    let data = SyntheticSpec {
        id_count: 80,
        image_size: 32,
        ..Default::default()
    };
    AblationSpec {
        train_ids: 64,
        model: ModelConfig {
            image_size: data.image_size,
            backbone: BackboneConfig {
                stem_channels: 16,
                stage_channels: vec![16, 32, 64],
                blocks_per_stage: 1,
                ibn: true,
            },
            ..Default::default()
        },
        train: TrainConfig {
            epochs_total: 40,
            stage1_epochs: 30,
            lr: 1e-3,
            decay_epochs: vec![20, 35],
            p: 8,
            k: 4,
            ..Default::default()
        },
        data,
        variants: vec![Variant::Baseline, Variant::Van, Variant::Anet],
        seeds: vec![0, 1, 2],
        cross_camera_filter: true,
        all_vs_all: true,
    }
}

/// Mean amelioration-constraint values of one stage-2 epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcEpoch {
    pub epoch: usize,
    pub ac_id: f64,
    pub ac_tri: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub selector: Selector,
    pub map: f64,
    pub r1: f64,
    pub r5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub seed: u64,
    pub scores: Vec<Score>,
    pub ac_epochs: Vec<AcEpoch>,
    /// Smallest amelioration-constraint value seen at any step.
    pub ac_min: Option<f64>,
    pub final_loss: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

impl Cell {
    pub fn score(&self, selector: Selector) -> Option<&Score> {
        self.scores.iter().find(|s| s.selector == selector)
    }
}

/// Per-epoch means of the constraint terms over stage-2 steps.
pub fn ac_epochs(log: &[StepLog]) -> Vec<AcEpoch> {
    let mut out: Vec<(usize, f64, f64, usize)> = Vec::new();
    for s in log.iter().filter(|s| s.stage == 2) {
        let (Some(id), Some(tri)) = (s.report.ac_id, s.report.ac_tri) else {
            continue;
        };
        match out.last_mut() {
            Some(e) if e.0 == s.epoch => {
                e.1 += id;
                e.2 += tri;
                e.3 += 1;
            }
            _ => out.push((s.epoch, id, tri, 1)),
        }
    }
    out.into_iter()
        .map(|(epoch, id, tri, n)| AcEpoch {
            epoch,
            ac_id: id / n as f64,
            ac_tri: tri / n as f64,
        })
        .collect()
}

/// Smallest constraint value over all steps that evaluated one.
pub fn ac_min(log: &[StepLog]) -> Option<f64> {
    log.iter()
        .flat_map(|s| [s.report.ac_id, s.report.ac_tri])
        .flatten()
        .reduce(f64::min)
}

/// Train one cell and return the outcome with its scores.
pub fn run_cell_full(
    spec: &AblationSpec,
    splits: &Splits,
    variant: Variant,
    seed: u64,
) -> Result<(Cell, TrainOutcome)> {
    let start = std::time::Instant::now();
    let (mc, tc) = spec.cell_configs(variant, seed);
    let outcome = train_with(&splits.train, &mc, &tc, |_| {})?;
    let held = if spec.all_vs_all { Some(splits.held_out()?) } else { None };
    let mut scores = Vec::new();
    for selector in Selector::ALL.into_iter().filter(|s| variant.supports(*s)) {
        let r = match &held {
            Some(h) => evaluate_fixed(h, h, &outcome.model, selector, true)?,
            None => evaluate_fixed(
                &splits.query,
                &splits.gallery,
                &outcome.model,
                selector,
                spec.cross_camera_filter,
            )?,
        };
        scores.push(Score {
            selector,
            map: r.map,
            r1: r.r1,
            r5: r.r5,
        });
    }
    let cell = Cell {
        variant,
        seed,
        scores,
        ac_epochs: ac_epochs(&outcome.log),
        ac_min: ac_min(&outcome.log),
        final_loss: outcome.log.last().map(|s| s.report.total),
        seconds: start.elapsed().as_secs_f64(),
        error: None,
    };
    log::info!(
        "{variant} seed {seed}: {}",
        cell.scores
            .iter()
            .map(|s| format!("{} mAP {:.4}", s.selector, s.map))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok((cell, outcome))
}

/// One cell; failures are recorded in the cell instead of aborting.
pub fn run_cell(spec: &AblationSpec, splits: &Splits, variant: Variant, seed: u64) -> Cell {
    match run_cell_full(spec, splits, variant, seed) {
        Ok((cell, _)) => cell,
        Err(e) => {
            log::warn!("{variant} seed {seed} failed: {e}");
            Cell {
                variant,
                seed,
                scores: Vec::new(),
                ac_epochs: Vec::new(),
                ac_min: None,
                final_loss: None,
                seconds: 0.0,
                error: Some(e.to_string()),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub variant: Variant,
    pub selector: Selector,
    pub median_map: Option<f64>,
    pub median_r1: Option<f64>,
    pub median_r5: Option<f64>,
    pub maps: Vec<f64>,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub spec: AblationSpec,
    pub cells: Vec<Cell>,
    pub rows: Vec<Row>,
}

/// Median of a non-empty list; the mean of the middle pair for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

impl AblationTable {
    pub fn from_cells(spec: AblationSpec, cells: Vec<Cell>) -> Self {
        let mut rows = Vec::new();
        for &variant in &spec.variants {
            for selector in Selector::ALL.into_iter().filter(|s| variant.supports(*s)) {
                let mine: Vec<&Cell> = cells.iter().filter(|c| c.variant == variant).collect();
                let scores: Vec<&Score> = mine.iter().filter_map(|c| c.score(selector)).collect();
                let col = |f: fn(&Score) -> f64| median(&scores.iter().map(|s| f(s)).collect::<Vec<_>>());
                rows.push(Row {
                    variant,
                    selector,
                    median_map: col(|s| s.map),
                    median_r1: col(|s| s.r1),
                    median_r5: col(|s| s.r5),
                    maps: scores.iter().map(|s| s.map).collect(),
                    failures: mine.iter().filter(|c| c.error.is_some()).count(),
                });
            }
        }
        AblationTable { spec, cells, rows }
    }

    pub fn row(&self, variant: Variant, selector: Selector) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.selector == selector)
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<4} {:>7} {:>7} {:>7} {:>6}",
            "variant", "feat", "mAP", "R1", "R5", "failed"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:<4} {:>7} {:>7} {:>7} {:>6}",
                r.variant.name(),
                r.selector.name(),
                pct(r.median_map),
                pct(r.median_r1),
                pct(r.median_r5),
                r.failures
            );
        }
        s
    }
}

/// Train and score every variant with every seed.
///
/// Cells run on the global rayon pool; results are ordered by variant then
/// seed regardless of completion order.
pub fn ablate(spec: &AblationSpec) -> Result<AblationTable> {
    ablate_on(spec, &spec.splits()?)
}

/// [`ablate`] on given splits instead of freshly generated ones.
pub fn ablate_on(spec: &AblationSpec, splits: &Splits) -> Result<AblationTable> {
    if spec.variants.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and seed".into()));
    }
    let jobs: Vec<(Variant, u64)> = spec
        .variants
        .iter()
        .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(v, s)| run_cell(spec, splits, v, s))
        .collect();
    Ok(AblationTable::from_cells(spec.clone(), cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
