//! Training objectives.
//!
//! Terms: label-smoothed identity and attribute cross-entropies, batch-hard
//! triplet losses on `f` and `j`, the attribute-pattern triplet on `g`, and the
//! amelioration constraints `AC_ID`, `AC_tri`. The composite objectives are
//!
//! * `L_VAN = L_tri^f + L_ID^f + lambda_A sum_i L_att^i`
//! * `L_JM  = L_tri^j + L_ID^j + lambda_G L_tri^g`
//! * `L     = L_JM + lambda L_VAN`
//! * `L'    = L_JM + lambda lambda_A sum_i L_att^i + AC_ID + AC_tri`
//!
//! `L'` is `L + AC_tri + AC_ID - lambda (L_tri^f + L_ID^f)` with the f terms
//! cancelled, so no gradient reaches `f`. Attribute terms average only over
//! samples whose label is present.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Outputs;
use crate::numerics::{softplus, Scalar, Tape, Var};

/// Floor under squared distances before the square root.
pub const DIST_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_g: f64,
    pub lambda: f64,
    pub margin: f64,
    pub smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_a: 1.0,
            lambda_g: 1.0,
            lambda: 1.0,
            margin: 0.3,
            smoothing: 0.1,
        }
    }
}

/// Where the `AC_tri` positive/negative pairs are mined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    JSpace,
    FSpace,
}

/// Composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `L_tri^f + L_ID^f`.
    Baseline,
    Van,
    Jm,
    L,
    LPrime,
    /// `L'` without the amelioration constraints.
    LPrimeNoAc,
}

impl Objective {
    pub fn second_stage(self) -> bool {
        matches!(self, Objective::LPrime | Objective::LPrimeNoAc)
    }

    fn uses_f(self) -> bool {
        matches!(self, Objective::Baseline | Objective::Van | Objective::L)
    }

    fn uses_att(self) -> bool {
        !matches!(self, Objective::Baseline | Objective::Jm)
    }

    fn uses_joint(self) -> bool {
        !matches!(self, Objective::Baseline | Objective::Van)
    }

    fn uses_ac(self) -> bool {
        self == Objective::LPrime
    }
}

/// Scalar value of every term of one batch. Absent terms were not evaluated
/// or had no eligible samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub tri_f: Option<f64>,
    pub id_f: Option<f64>,
    pub att: Vec<Option<f64>>,
    pub tri_g: Option<f64>,
    pub tri_j: Option<f64>,
    pub id_j: Option<f64>,
    pub ac_id: Option<f64>,
    pub ac_tri: Option<f64>,
    pub total: f64,
    /// Samples lacking each attribute label.
    pub masked_counts: Vec<usize>,
    /// Anchors excluded from the attribute-pattern triplet for missing labels.
    pub pattern_masked: usize,
}

/// Composite value recomputed from the parts of a report.
pub fn composite(r: &LossReport, w: &LossWeights, mode: Objective) -> Result<f64> {
    let need = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| Error::InvalidArgument(format!("objective {mode:?} needs {name}")))
    };
    let att: f64 = r.att.iter().flatten().sum();
    let tri_g = r.tri_g.unwrap_or(0.0);
    let van = |r: &LossReport| -> Result<f64> {
        Ok(need(r.tri_f, "L_tri^f")? + need(r.id_f, "L_ID^f")? + w.lambda_a * att)
    };
    let jm = |r: &LossReport| -> Result<f64> {
        Ok(need(r.tri_j, "L_tri^j")? + need(r.id_j, "L_ID^j")? + w.lambda_g * tri_g)
    };
    Ok(match mode {
        Objective::Baseline => need(r.tri_f, "L_tri^f")? + need(r.id_f, "L_ID^f")?,
        Objective::Van => van(r)?,
        Objective::Jm => jm(r)?,
        Objective::L => jm(r)? + w.lambda * van(r)?,
        Objective::LPrime => {
            jm(r)? + w.lambda * w.lambda_a * att + need(r.ac_id, "AC_ID")? + need(r.ac_tri, "AC_tri")?
        }
        Objective::LPrimeNoAc => jm(r)? + w.lambda * w.lambda_a * att,
    })
}

/// `L + AC_tri + AC_ID - lambda (L_tri^f + L_ID^f)` evaluated literally.
pub fn l_prime_literal(r: &LossReport, w: &LossWeights) -> Result<f64> {
    let l = composite(r, w, Objective::L)?;
    let f = r.tri_f.unwrap_or(0.0) + r.id_f.unwrap_or(0.0);
    let ac = r.ac_id.unwrap_or(0.0) + r.ac_tri.unwrap_or(0.0);
    Ok(l + ac - w.lambda * f)
}

/// Label-smoothed cross-entropy of one logit row.
pub fn ce_label_smooth(logits: &[f64], target: usize, eps: f64) -> f64 {
    let m = logits.len() as f64;
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
    logits
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let q = if k == target { 1.0 - eps + eps / m } else { eps / m };
            q * (lse - v)
        })
        .sum()
}

/// `softplus(L_ID^j - L_ID^f)` for one image.
pub fn ac_id_value(l_id_j: f64, l_id_f: f64) -> f64 {
    softplus(l_id_j - l_id_f)
}

/// Mined (anchor, positive, negative) triples, one per anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mined {
    pub anchors: Vec<usize>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// Euclidean distance matrix `n x n` of the rows of `x`.
fn distances<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let sq = tape.pairwise_sq_dist(x)?;
    Ok(tape.sqrt_clamped(sq, T::of(DIST_FLOOR)))
}

/// Batch-hard mining on a distance matrix. `same(a, b)` tells positives;
/// `eligible(a, b)` filters partners. The anchor itself counts as a positive
/// when `self_positive` is set. Ties break toward the lower index.
fn mine<T: Scalar>(
    d: &[T],
    n: usize,
    anchors: impl Iterator<Item = usize>,
    same: impl Fn(usize, usize) -> bool,
    eligible: impl Fn(usize, usize) -> bool,
    self_positive: bool,
) -> Mined {
    let mut m = Mined {
        anchors: vec![],
        pos: vec![],
        neg: vec![],
    };
    for a in anchors {
        let mut p: Option<usize> = None;
        let mut q: Option<usize> = None;
        for b in 0..n {
            if !eligible(a, b) {
                continue;
            }
            let dv = d[a * n + b];
            if same(a, b) {
                if (b != a || self_positive) && p.is_none_or(|p| dv > d[a * n + p]) {
                    p = Some(b);
                }
            } else if q.is_none_or(|q| dv < d[a * n + q]) {
                q = Some(b);
            }
        }
        if let (Some(p), Some(q)) = (p, q) {
            m.anchors.push(a);
            m.pos.push(p);
            m.neg.push(q);
        }
    }
    m
}

/// Mean over mined anchors of `relu(margin + d(a,p) - d(a,n))`.
fn triplet_from_mined<T: Scalar>(
    tape: &mut Tape<T>,
    d: Var,
    n: usize,
    mined: &Mined,
    margin: f64,
) -> Result<Var> {
    let ip: Vec<usize> = mined.anchors.iter().zip(&mined.pos).map(|(&a, &p)| a * n + p).collect();
    let iq: Vec<usize> = mined.anchors.iter().zip(&mined.neg).map(|(&a, &q)| a * n + q).collect();
    let dp = tape.gather(d, &ip)?;
    let dn = tape.gather(d, &iq)?;
    let diff = tape.sub(dp, dn)?;
    let h = tape.add_scalar(diff, T::of(margin));
    let h = tape.relu(h);
    Ok(tape.mean(h))
}

/// Batch-hard triplet loss over identities.
pub fn triplet_batch_hard<T: Scalar>(
    tape: &mut Tape<T>,
    emb: Var,
    ids: &[usize],
    margin: f64,
) -> Result<(Var, Mined)> {
    let n = ids.len();
    if tape.shape(emb).first() != Some(&n) {
        return Err(Error::shape("triplet embeddings", tape.shape(emb), &[n]));
    }
    if ids.iter().all(|&i| i == ids[0]) {
        return Err(Error::Degenerate(
            "triplet loss needs at least two identities in the batch".into(),
        ));
    }
    let d = distances(tape, emb)?;
    let mined = mine(tape.value(d).data(), n, 0..n, |a, b| ids[a] == ids[b], |_, _| true, true);
    let loss = triplet_from_mined(tape, d, n, &mined, margin)?;
    Ok((loss, mined))
}

/// Triplet loss where positives share the full attribute tuple. Samples with
/// any absent label neither anchor nor partner. Returns `None` when no anchor
/// has both a positive and a negative, plus the count of anchors masked for
/// missing labels.
pub fn triplet_attribute_pattern<T: Scalar>(
    tape: &mut Tape<T>,
    g: Var,
    labels: &[Vec<Option<usize>>],
    margin: f64,
) -> Result<(Option<Var>, usize)> {
    let n = labels.len();
    if tape.shape(g).first() != Some(&n) {
        return Err(Error::shape("pattern embeddings", tape.shape(g), &[n]));
    }
    let complete: Vec<bool> = labels.iter().map(|l| l.iter().all(Option::is_some)).collect();
    let masked = complete.iter().filter(|c| !**c).count();
    let d = distances(tape, g)?;
    let mined = mine(
        tape.value(d).data(),
        n,
        (0..n).filter(|&a| complete[a]),
        |a, b| labels[a] == labels[b],
        |a, b| complete[b] && a != b,
        false,
    );
    if mined.anchors.is_empty() {
        return Ok((None, masked));
    }
    Ok((Some(triplet_from_mined(tape, d, n, &mined, margin)?), masked))
}

/// Mean over images of `softplus(ce_j - ce_f)` with `ce_f` held constant.
pub fn ac_id<T: Scalar>(tape: &mut Tape<T>, ce_j: Var, ce_f: Var) -> Result<Var> {
    let cf = tape.detach(ce_f);
    let diff = tape.sub(ce_j, cf)?;
    let s = tape.softplus(diff);
    Ok(tape.mean(s))
}

/// Mean over anchors of
/// `softplus(Dj(a,p) - Df(a,p)) + softplus(Df(a,n) - Dj(a,n))`, `f` constant.
pub fn ac_tri<T: Scalar>(tape: &mut Tape<T>, j: Var, f: Var, mined: &Mined) -> Result<Var> {
    let n = tape.shape(j)[0];
    if tape.shape(f)[0] != n {
        return Err(Error::shape("ac_tri", tape.shape(j), tape.shape(f)));
    }
    if mined.anchors.is_empty() {
        return Err(Error::Degenerate("AC_tri needs at least one mined triple".into()));
    }
    let fd = tape.detach(f);
    let dj = distances(tape, j)?;
    let df = distances(tape, fd)?;
    let ip: Vec<usize> = mined.anchors.iter().zip(&mined.pos).map(|(&a, &p)| a * n + p).collect();
    let iq: Vec<usize> = mined.anchors.iter().zip(&mined.neg).map(|(&a, &q)| a * n + q).collect();
    let (djp, dfp) = (tape.gather(dj, &ip)?, tape.gather(df, &ip)?);
    let (djn, dfn) = (tape.gather(dj, &iq)?, tape.gather(df, &iq)?);
    let pos = tape.sub(djp, dfp)?;
    let pos = tape.softplus(pos);
    let neg = tape.sub(dfn, djn)?;
    let neg = tape.softplus(neg);
    let both = tape.add(pos, neg)?;
    Ok(tape.mean(both))
}

/// Labels of one batch: contiguous identity classes and attribute slots.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLabels {
    pub ids: Vec<usize>,
    pub attrs: Vec<Vec<Option<usize>>>,
}

/// Build the objective on the tape. Returns the scalar to differentiate and
/// the per-term report.
pub fn compute<T: Scalar>(
    tape: &mut Tape<T>,
    out: &Outputs,
    labels: &BatchLabels,
    w: &LossWeights,
    mode: Objective,
    mining: Mining,
    second_stage: bool,
) -> Result<(Var, LossReport)> {
    if mode.second_stage() && !second_stage {
        return Err(Error::InvalidArgument(format!(
            "objective {mode:?} is only valid in the second training stage"
        )));
    }
    let n = labels.ids.len();
    let eps = T::of(w.smoothing);
    let ids: Vec<Option<usize>> = labels.ids.iter().map(|&i| Some(i)).collect();
    let mut report = LossReport::default();
    let mut terms: Vec<(Var, T)> = Vec::new();
    let val = |tape: &Tape<T>, v: Var| Some(tape.scalar(v).to_f64());

    // f-side terms; AC_ID needs the per-image f cross-entropy as a reference.
    let ce_f = tape.cross_entropy(out.f_logits, &ids, eps)?;
    let mut f_mined = None;
    if mode.uses_f() {
        let id_f = tape.mean(ce_f);
        let (tri_f, mined) = triplet_batch_hard(tape, out.f, &labels.ids, w.margin)?;
        f_mined = Some(mined);
        report.id_f = val(tape, id_f);
        report.tri_f = val(tape, tri_f);
        let c = if mode == Objective::L { w.lambda } else { 1.0 };
        terms.push((tri_f, T::of(c)));
        terms.push((id_f, T::of(c)));
    }

    // Attribute classification.
    let n_attr = out.branches.len();
    report.masked_counts = (0..n_attr)
        .map(|i| labels.attrs.iter().filter(|a| a[i].is_none()).count())
        .collect();
    if mode.uses_att() {
        let coef = match mode {
            Objective::Van => w.lambda_a,
            _ => w.lambda * w.lambda_a,
        };
        for (i, br) in out.branches.iter().enumerate() {
            let targets: Vec<Option<usize>> = labels.attrs.iter().map(|a| a[i]).collect();
            let mask: Vec<bool> = targets.iter().map(Option::is_some).collect();
            let ce = tape.cross_entropy(br.logits, &targets, eps)?;
            let term = tape.masked_mean(ce, &mask)?;
            report.att.push(term.and_then(|t| val(tape, t)));
            if let Some(t) = term {
                terms.push((t, T::of(coef)));
            }
        }
    }

    // Joint-module terms.
    if mode.uses_joint() {
        let joint = out.joint.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("objective {mode:?} needs the joint module"))
        })?;
        let ce_j = tape.cross_entropy(joint.j_logits, &ids, eps)?;
        let id_j = tape.mean(ce_j);
        let (tri_j, j_mined) = triplet_batch_hard(tape, joint.j, &labels.ids, w.margin)?;
        let (tri_g, masked) = triplet_attribute_pattern(tape, joint.g, &labels.attrs, w.margin)?;
        report.id_j = val(tape, id_j);
        report.tri_j = val(tape, tri_j);
        report.tri_g = tri_g.and_then(|t| val(tape, t));
        report.pattern_masked = masked;
        terms.push((tri_j, T::one()));
        terms.push((id_j, T::one()));
        if let Some(t) = tri_g {
            terms.push((t, T::of(w.lambda_g)));
        }
        if mode.uses_ac() {
            let a_id = ac_id(tape, ce_j, ce_f)?;
            let pairs = match mining {
                Mining::JSpace => j_mined,
                Mining::FSpace => match f_mined.take() {
                    Some(m) => m,
                    None => {
                        let d = distances(tape, out.f)?;
                        let ids = &labels.ids;
                        mine(tape.value(d).data(), n, 0..n, |a, b| ids[a] == ids[b], |_, _| true, true)
                    }
                },
            };
            let a_tri = ac_tri(tape, joint.j, out.f, &pairs)?;
            report.ac_id = val(tape, a_id);
            report.ac_tri = val(tape, a_tri);
            terms.push((a_id, T::one()));
            terms.push((a_tri, T::one()));
        }
    }

    let total = tape.combine(&terms)?;
    report.total = tape.scalar(total).to_f64();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn uniform_logits_give_log_m() {
        for eps in [0.0, 0.1, 0.5] {
            assert!((ce_label_smooth(&[0.3; 5], 2, eps) - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_smoothing_is_plain_ce() {
        let l = [2.0, -1.0, 0.5];
        let lse = l.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((ce_label_smooth(&l, 0, 0.0) - (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn tape_ce_matches_value_ce() {
        let logits = [0.3, -1.2, 2.2, 0.0, 0.7, 1.1, -0.4, 0.9, 0.2, -2.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2, 5], logits.to_vec()));
        let ce = tape.cross_entropy(x, &[Some(3), Some(0)], 0.1).unwrap();
        let v = tape.value(ce).data();
        assert!((v[0] - ce_label_smooth(&logits[..5], 3, 0.1)).abs() < 1e-12);
        assert!((v[1] - ce_label_smooth(&logits[5..], 0, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let l = [0.1, 1.9, -0.7, 0.4];
        let s: Vec<f64> = l.iter().map(|v| v + 13.0).collect();
        assert!((ce_label_smooth(&l, 1, 0.1) - ce_label_smooth(&s, 1, 0.1)).abs() < 1e-6);
    }

    fn emb(tape: &mut Tape<f64>, rows: &[[f64; 2]]) -> Var {
        tape.constant(Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()))
    }

    #[test]
    fn identical_embeddings_cost_the_margin() {
        let mut tape = Tape::new();
        let e = emb(&mut tape, &[[1.0, 1.0]; 4]);
        let (l, _) = triplet_batch_hard(&mut tape, e, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((tape.scalar(l) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn separated_identities_cost_nothing() {
        let mut tape = Tape::new();
        let e = emb(&mut tape, &[[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [10.0, 0.0]]);
        let (l, _) = triplet_batch_hard(&mut tape, e, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn single_identity_rejected() {
        let mut tape = Tape::new();
        let e = emb(&mut tape, &[[0.0, 1.0], [1.0, 0.0]]);
        assert!(triplet_batch_hard(&mut tape, e, &[3, 3], 0.3).is_err());
    }

    #[test]
    fn pattern_triplet_degenerate_cases() {
        let mut tape = Tape::new();
        let e = emb(&mut tape, &[[0.0, 1.0], [1.0, 0.0], [2.0, 0.0]]);
        let same = vec![vec![Some(1), Some(2)]; 3];
        assert_eq!(triplet_attribute_pattern(&mut tape, e, &same, 0.3).unwrap().0, None);
        let missing = vec![vec![None, Some(2)]; 3];
        let (l, masked) = triplet_attribute_pattern(&mut tape, e, &missing, 0.3).unwrap();
        assert!(l.is_none());
        assert_eq!(masked, 3);
    }

    #[test]
    fn ac_asymptotes() {
        assert!((ac_id_value(1.3, 1.3) - 2f64.ln()).abs() < 1e-15);
        let tiny = ac_id_value(-40.0, 10.0);
        assert!(tiny > 0.0 && tiny < 1e-20);
    }

    #[test]
    fn ac_tri_equal_embeddings_is_two_ln2() {
        let mut tape = Tape::new();
        let rows = [[0.0, 1.0], [0.5, 1.0], [3.0, -1.0], [2.0, 2.0]];
        let j = emb(&mut tape, &rows);
        let f = emb(&mut tape, &rows);
        let (_, mined) = triplet_batch_hard(&mut tape, j, &[0, 0, 1, 1], 0.3).unwrap();
        let v = ac_tri(&mut tape, j, f, &mined).unwrap();
        assert!((tape.scalar(v) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    fn unit_report() -> LossReport {
        LossReport {
            tri_f: Some(1.0),
            id_f: Some(1.0),
            att: vec![Some(1.0), Some(1.0)],
            tri_g: Some(1.0),
            tri_j: Some(1.0),
            id_j: Some(1.0),
            ac_id: Some(1.0),
            ac_tri: Some(1.0),
            ..Default::default()
        }
    }

    #[test]
    fn composite_examples() {
        let w = LossWeights::default();
        assert_eq!(composite(&unit_report(), &w, Objective::Van).unwrap(), 4.0);
        let w0 = LossWeights {
            lambda: 0.0,
            ..Default::default()
        };
        let r = unit_report();
        assert_eq!(
            composite(&r, &w0, Objective::L).unwrap(),
            composite(&r, &w0, Objective::Jm).unwrap()
        );
        let mut missing = unit_report();
        missing.ac_id = None;
        assert!(composite(&missing, &w, Objective::LPrime).is_err());
    }

    #[test]
    fn baseline_reduction() {
        let mut r = unit_report();
        r.tri_f = Some(0.7);
        r.id_f = Some(2.1);
        for t in [&mut r.tri_g, &mut r.tri_j, &mut r.id_j, &mut r.ac_id, &mut r.ac_tri] {
            *t = Some(0.0);
        }
        r.att = vec![Some(0.0), Some(0.0)];
        let w = LossWeights::default();
        let l = composite(&r, &w, Objective::L).unwrap();
        assert!((l - 2.8).abs() < 1e-12);
        assert_eq!(composite(&r, &w, Objective::Baseline).unwrap(), l);
    }
}
