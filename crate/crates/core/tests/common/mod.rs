//! Shared fixtures and independent oracles for the integration tests.

#![allow(dead_code)]

use anet::data::{Dataset, Sample, SyntheticSpec, gen_synthetic};
use anet::model::{BackboneConfig, ModelConfig, Variant};
use anet::numerics::Tensor;
use rand::Rng;

/// One retrieval problem with labels.
pub struct Instance {
    pub q: Tensor<f32>,
    pub g: Tensor<f32>,
    pub qids: Vec<usize>,
    pub qcams: Vec<usize>,
    pub gids: Vec<usize>,
    pub gcams: Vec<usize>,
}

/// Small integer-valued features so distance ties are common.
pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let nq = rng.gen_range(1..=20);
    let ng = rng.gen_range(1..=50);
    let dim = rng.gen_range(1..=4);
    let ids = rng.gen_range(1..=6);
    let cams = rng.gen_range(1..=3);
    let mut feat = |n: usize| Tensor::from_fn(&[n, dim], |_| rng.gen_range(-2i32..=2) as f32);
    let q = feat(nq);
    let g = feat(ng);
    Instance {
        q,
        g,
        qids: (0..nq).map(|_| rng.gen_range(0..ids)).collect(),
        qcams: (0..nq).map(|_| rng.gen_range(0..cams)).collect(),
        gids: (0..ng).map(|_| rng.gen_range(0..ids)).collect(),
        gcams: (0..ng).map(|_| rng.gen_range(0..cams)).collect(),
    }
}

/// Definition-level scores: per-query AP list, CMC curve, excluded count.
///
/// The rank of a gallery item is one plus the number of valid items that are
/// strictly closer, or equally close with a smaller index. No sorting.
pub fn oracle(inst: &Instance, filter: bool) -> (Vec<f64>, Vec<f64>, usize) {
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        let mut s = 0.0f64;
        for k in 0..a.len() {
            s += (a[k] as f64 - b[k] as f64).powi(2);
        }
        s
    };
    let ng = inst.g.dim(0);
    let mut aps = Vec::new();
    let mut first_ranks = Vec::new();
    let mut excluded = 0;
    for qi in 0..inst.q.dim(0) {
        let valid: Vec<usize> = (0..ng)
            .filter(|&j| !(filter && inst.gids[j] == inst.qids[qi] && inst.gcams[j] == inst.qcams[qi]))
            .collect();
        let d: Vec<f64> = (0..ng).map(|j| dist(inst.q.row(qi), inst.g.row(j))).collect();
        let rank = |j: usize| 1 + valid.iter().filter(|&&o| d[o] < d[j] || (d[o] == d[j] && o < j)).count();
        let rel: Vec<usize> = valid.iter().copied().filter(|&j| inst.gids[j] == inst.qids[qi]).collect();
        if rel.is_empty() {
            excluded += 1;
            continue;
        }
        let mut ap = 0.0;
        for &r in &rel {
            let rr = rank(r);
            let above = rel.iter().filter(|&&o| rank(o) <= rr).count();
            ap += above as f64 / rr as f64;
        }
        aps.push(ap / rel.len() as f64);
        first_ranks.push(rel.iter().map(|&r| rank(r)).min().unwrap());
    }
    let n = aps.len() as f64;
    let cmc = (1..=ng)
        .map(|k| first_ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect();
    (aps, cmc, excluded)
}

pub fn small_model(variant: Variant, image_size: usize, id_classes: usize) -> ModelConfig {
    ModelConfig {
        variant,
        image_size,
        backbone: BackboneConfig {
            stem_channels: 8,
            stage_channels: vec![8, 16],
            blocks_per_stage: 1,
            ibn: true,
        },
        s_f: 16,
        s_a: 8,
        s_j: 16,
        se_reduction: 4,
        cbam_kernel: 3,
        id_classes,
        attr_classes: vec![6, 4],
        ..Default::default()
    }
}

pub fn small_data(ids: usize, per_id: usize, size: usize, seed: u64) -> Dataset {
    gen_synthetic(&SyntheticSpec {
        id_count: ids,
        images_per_id: per_id,
        image_size: size,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn images(ds: &Dataset) -> Vec<Tensor<f32>> {
    ds.samples.iter().map(|s: &Sample| s.image.clone()).collect()
}
