//! Ranking and retrieval metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Fixed query and gallery sets.
    #[serde(rename = "fixed")]
    Fixed,
    /// Repeated one-image-per-id gallery sampling over a test set.
    #[serde(rename = "vehicleid-repeat")]
    VehicleIdRepeat,
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Protocol::Fixed),
            "vehicleid" | "vehicleid-repeat" => Ok(Protocol::VehicleIdRepeat),
            _ => Err(Error::Config(format!("unknown protocol '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    /// `cmc[k]` is the fraction of queries with a true match within rank `k + 1`.
    pub cmc: Vec<f64>,
    pub r1: f64,
    pub r5: f64,
    pub per_query_ap: Vec<f64>,
    pub protocol: Protocol,
    pub repeats: usize,
    pub seed: u64,
    /// Queries without any valid gallery match, left out of every metric.
    pub excluded_queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r5_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Identity and camera of every row of a feature matrix.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub ids: &'a [usize],
    pub cams: &'a [usize],
}

fn check(feats: &Tensor<f32>, labels: Labels<'_>, what: &str) -> Result<()> {
    if feats.rank() != 2 || feats.dim(0) == 0 {
        return Err(Error::InvalidArgument(format!(
            "{what} features must be a non-empty matrix, got {:?}",
            feats.shape()
        )));
    }
    if labels.ids.len() != feats.dim(0) || labels.cams.len() != feats.dim(0) {
        return Err(Error::InvalidArgument(format!(
            "{what}: {} rows but {} ids and {} cameras",
            feats.dim(0),
            labels.ids.len(),
            labels.cams.len()
        )));
    }
    Ok(())
}

/// Squared Euclidean distance, accumulated in f64.
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Gallery indices sorted by ascending distance, ties by index.
pub fn rank_gallery(query: &[f32], gallery: &Tensor<f32>) -> Vec<usize> {
    let d: Vec<f64> = (0..gallery.dim(0)).map(|g| sq_dist(query, gallery.row(g))).collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order
}

/// Average precision and first-hit rank (0-based) of one ranked list of
/// relevance flags, or `None` when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<(f64, usize)> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut first = None;
    for (rank, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
            first.get_or_insert(rank);
        }
    }
    first.map(|f| (sum / hits as f64, f))
}

/// Rank every query against the gallery and score the result.
///
/// With `cross_camera_filter`, gallery entries sharing both identity and
/// camera with the query are removed from that query's list.
pub fn rank_and_score(
    query: &Tensor<f32>,
    query_labels: Labels<'_>,
    gallery: &Tensor<f32>,
    gallery_labels: Labels<'_>,
    cross_camera_filter: bool,
) -> Result<EvalReport> {
    check(query, query_labels, "query")?;
    check(gallery, gallery_labels, "gallery")?;
    if query.dim(1) != gallery.dim(1) {
        return Err(Error::shape("rank_and_score", query.shape(), gallery.shape()));
    }
    let per_query: Vec<Option<(f64, usize)>> = (0..query.dim(0))
        .into_par_iter()
        .map(|q| {
            let (qid, qcam) = (query_labels.ids[q], query_labels.cams[q]);
            let relevant: Vec<bool> = rank_gallery(query.row(q), gallery)
                .into_iter()
                .filter(|&g| {
                    !(cross_camera_filter
                        && gallery_labels.ids[g] == qid
                        && gallery_labels.cams[g] == qcam)
                })
                .map(|g| gallery_labels.ids[g] == qid)
                .collect();
            average_precision(&relevant)
        })
        .collect();
    let scored: Vec<(f64, usize)> = per_query.iter().flatten().copied().collect();
    let excluded = per_query.len() - scored.len();
    if scored.is_empty() {
        return Err(Error::Degenerate(
            "no query has a valid gallery match".into(),
        ));
    }
    let n = scored.len() as f64;
    let mut first_hits = vec![0usize; gallery.dim(0)];
    for &(_, first) in &scored {
        first_hits[first] += 1;
    }
    let mut acc = 0usize;
    let cmc: Vec<f64> = first_hits
        .iter()
        .map(|&h| {
            acc += h;
            acc as f64 / n
        })
        .collect();
    let per_query_ap: Vec<f64> = scored.iter().map(|&(ap, _)| ap).collect();
    let map = per_query_ap.iter().sum::<f64>() / n;
    Ok(EvalReport {
        map,
        r1: cmc[0],
        r5: cmc[4.min(cmc.len() - 1)],
        cmc,
        per_query_ap,
        protocol: Protocol::Fixed,
        repeats: 1,
        seed: 0,
        excluded_queries: excluded,
        map_std: None,
        r1_std: None,
        r5_std: None,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::new(&[rows.len(), rows[0].len()], rows.concat())
    }

    #[test]
    fn nearest_correct_item_scores_one() {
        let q = mat(&[&[0.0, 0.0]]);
        let g = mat(&[&[0.1, 0.0], &[1.0, 1.0]]);
        let r = rank_and_score(
            &q,
            Labels { ids: &[1], cams: &[0] },
            &g,
            Labels { ids: &[1, 2], cams: &[1, 1] },
            true,
        )
        .unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.r1, 1.0);
        assert_eq!(r.cmc, vec![1.0, 1.0]);
    }

    #[test]
    fn hits_at_one_and_three() {
        let (ap, first) = average_precision(&[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(first, 0);
        assert!(average_precision(&[false, false]).is_none());
    }

    #[test]
    fn same_camera_matches_are_filtered() {
        let q = mat(&[&[0.0], &[5.0]]);
        let g = mat(&[&[0.0], &[3.0], &[5.0]]);
        let gl = Labels { ids: &[1, 1, 2], cams: &[0, 1, 0] };
        let ql = Labels { ids: &[1, 2], cams: &[0, 0] };
        let r = rank_and_score(&q, ql, &g, gl, true).unwrap();
        // Query 0 loses the exact same-camera match; query 1 has nothing left.
        assert_eq!(r.excluded_queries, 1);
        assert_eq!(r.per_query_ap, vec![1.0]);
        let r = rank_and_score(&q, ql, &g, gl, false).unwrap();
        assert_eq!(r.excluded_queries, 0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let g = mat(&[&[1.0], &[-1.0], &[1.0]]);
        assert_eq!(rank_gallery(&[0.0], &g), vec![0, 1, 2]);
    }

    #[test]
    fn all_excluded_is_degenerate() {
        let q = mat(&[&[0.0]]);
        let g = mat(&[&[0.0]]);
        let l = Labels { ids: &[1], cams: &[0] };
        assert!(matches!(
            rank_and_score(&q, l, &g, l, true),
            Err(Error::Degenerate(_))
        ));
    }
}
