//! Fixed-gallery and repeated one-per-identity gallery protocols.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::extract_features;
use super::metrics::{rank_and_score, EvalReport, Labels, Protocol};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelState, Selector};
use crate::numerics::Tensor;

/// Number of gallery samplings in the repeated protocol.
pub const DEFAULT_REPEATS: usize = 10;

fn labels(data: &Dataset) -> (Vec<usize>, Vec<usize>) {
    data.samples.iter().map(|s| (s.identity, s.camera)).unzip()
}

/// Query set against gallery set, same-camera true matches filtered when asked.
pub fn evaluate_fixed(
    query: &Dataset,
    gallery: &Dataset,
    state: &ModelState,
    selector: Selector,
    cross_camera_filter: bool,
) -> Result<EvalReport> {
    let qf = extract_features(query, state, selector)?;
    let gf = extract_features(gallery, state, selector)?;
    let (qi, qc) = labels(query);
    let (gi, gc) = labels(gallery);
    rank_and_score(
        &qf,
        Labels { ids: &qi, cams: &qc },
        &gf,
        Labels { ids: &gi, cams: &gc },
        cross_camera_filter,
    )
}

fn rows(feats: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let d = feats.dim(1);
    let data = idx.iter().flat_map(|&i| feats.row(i).iter().copied()).collect();
    Tensor::new(&[idx.len(), d], data)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Repeated protocol on precomputed features: each repeat draws one gallery
/// image per identity and queries with the rest. Cameras are ignored.
pub fn vehicleid_on_features(
    feats: &Tensor<f32>,
    ids: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<EvalReport> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    if ids.len() != feats.dim(0) {
        return Err(Error::InvalidArgument(format!(
            "{} feature rows but {} ids",
            feats.dim(0),
            ids.len()
        )));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    let warnings: Vec<String> = groups
        .iter()
        .filter(|(_, v)| v.len() < 2)
        .map(|(id, _)| format!("identity {id} has a single image and only joins the gallery"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut gallery = Vec::with_capacity(groups.len());
        let mut query = Vec::new();
        for members in groups.values() {
            let g = *members.choose(&mut rng).expect("groups are non-empty");
            gallery.push(g);
            query.extend(members.iter().copied().filter(|&i| i != g));
        }
        if query.is_empty() {
            return Err(Error::Degenerate("no identity has two images".into()));
        }
        let pick = |idx: &[usize]| idx.iter().map(|&i| ids[i]).collect::<Vec<_>>();
        let (qi, gi) = (pick(&query), pick(&gallery));
        let (qc, gc) = (vec![0; qi.len()], vec![0; gi.len()]);
        reports.push(rank_and_score(
            &rows(feats, &query),
            Labels { ids: &qi, cams: &qc },
            &rows(feats, &gallery),
            Labels { ids: &gi, cams: &gc },
            false,
        )?);
    }
    let (map, map_std) = mean_std(&reports.iter().map(|r| r.map).collect::<Vec<_>>());
    let (r1, r1_std) = mean_std(&reports.iter().map(|r| r.r1).collect::<Vec<_>>());
    let (r5, r5_std) = mean_std(&reports.iter().map(|r| r.r5).collect::<Vec<_>>());
    let ranks = reports[0].cmc.len();
    let cmc = (0..ranks)
        .map(|k| reports.iter().map(|r| r.cmc[k]).sum::<f64>() / repeats as f64)
        .collect();
    Ok(EvalReport {
        map,
        cmc,
        r1,
        r5,
        per_query_ap: reports.iter().flat_map(|r| r.per_query_ap.iter().copied()).collect(),
        protocol: Protocol::VehicleIdRepeat,
        repeats,
        seed,
        excluded_queries: reports.iter().map(|r| r.excluded_queries).sum(),
        map_std: Some(map_std),
        r1_std: Some(r1_std),
        r5_std: Some(r5_std),
        warnings,
    })
}

/// Repeated protocol on a test set.
pub fn vehicleid_protocol(
    test: &Dataset,
    state: &ModelState,
    selector: Selector,
    repeats: usize,
    seed: u64,
) -> Result<EvalReport> {
    let feats = extract_features(test, state, selector)?;
    let (ids, _) = labels(test);
    vehicleid_on_features(&feats, &ids, repeats, seed)
}
