//! Identity-balanced `P x K` batch sampling.

use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;

use super::sample::Dataset;
use crate::error::{Error, Result};

/// Dataset indices for `p` identities with `k` images each, grouped by identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draw `p` identities without replacement and `k` images for each.
///
/// Images are drawn without replacement when the identity has at least `k`
/// of them and with replacement otherwise.
pub fn pk_sample<R: Rng>(dataset: &Dataset, p: usize, k: usize, rng: &mut R) -> Result<PkBatch> {
    if p == 0 || k == 0 {
        return Err(Error::InvalidArgument("P and K must be positive".into()));
    }
    let groups = dataset.by_identity();
    if p > groups.len() {
        return Err(Error::InvalidArgument(format!(
            "P = {p} exceeds the {} identities available",
            groups.len()
        )));
    }
    let chosen = groups.values().choose_multiple(rng, p);
    let mut indices = Vec::with_capacity(p * k);
    for members in chosen {
        if members.len() >= k {
            indices.extend(members.choose_multiple(rng, k).copied());
        } else {
            indices.extend((0..k).map(|_| members[rng.gen_range(0..members.len())]));
        }
    }
    Ok(PkBatch { indices, p, k })
}

/// Number of PK batches that cover the dataset once, `ceil(len / (p k))`.
pub fn batches_per_epoch(len: usize, p: usize, k: usize) -> usize {
    len.div_ceil(p * k).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample::{AttributeSchema, Sample, Split};
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn dataset(per_id: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (id, &n) in per_id.iter().enumerate() {
            for _ in 0..n {
                samples.push(Sample {
                    image: Tensor::zeros(&[3, 1, 1]),
                    identity: id,
                    camera: 0,
                    attributes: vec![None, None],
                });
            }
        }
        Dataset::new(samples, AttributeSchema::color_type(2, 2), Split::Train).unwrap()
    }

    fn composition(ds: &Dataset, b: &PkBatch) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &i in &b.indices {
            *m.entry(ds.samples[i].identity).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn two_by_four() {
        let ds = dataset(&[5, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = pk_sample(&ds, 2, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 8);
        let comp = composition(&ds, &b);
        assert_eq!(comp.len(), 2);
        assert!(comp.values().all(|&c| c == 4));
    }

    #[test]
    fn small_identity_repeats() {
        let ds = dataset(&[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = pk_sample(&ds, 1, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        let mut uniq = b.indices.clone();
        uniq.sort();
        uniq.dedup();
        assert!(uniq.len() <= 2);
    }

    #[test]
    fn too_many_identities() {
        let ds = dataset(&[2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(pk_sample(&ds, 3, 1, &mut rng).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = dataset(&[3, 4, 5, 6]);
        let a = pk_sample(&ds, 2, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = pk_sample(&ds, 2, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batches_per_epoch_rounds_up() {
        assert_eq!(batches_per_epoch(512, 4, 4), 32);
        assert_eq!(batches_per_epoch(513, 4, 4), 33);
        assert_eq!(batches_per_epoch(0, 4, 4), 1);
    }
}
