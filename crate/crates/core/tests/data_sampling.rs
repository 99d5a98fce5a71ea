mod common;

use anet::data::augment::{erase, sample_erase_rect};
use anet::data::{pk_sample, AugmentPolicy};
use anet::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn pk_draws_are_uniform_over_identities() {
    let ds = common::small_data(16, 3, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = [0usize; 16];
    for _ in 0..10_000 {
        let b = pk_sample(&ds, 4, 2, &mut rng).unwrap();
        for chunk in b.indices.chunks(2) {
            counts[ds.samples[chunk[0]].identity] += 1;
        }
    }
    // Each draw includes a given id with probability 1/4.
    let (mean, sd) = (2500.0, (10_000.0f64 * 0.25 * 0.75).sqrt());
    for (id, &c) in counts.iter().enumerate() {
        assert!(c > 0, "identity {id} never drawn");
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "identity {id}: {c}");
    }
}

#[test]
fn erasing_replaces_exactly_one_rectangle() {
    let policy = AugmentPolicy {
        erase_p: 1.0,
        fill: [0.25, 0.5, 0.75],
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..50 {
        let img = Tensor::from_fn(&[3, 20, 24], |i| 0.9 + (i % 7) as f32 * 0.01);
        let rect = sample_erase_rect(20, 24, &policy, &mut rng).expect("p = 1 always erases");
        let mut out = img.clone();
        erase(&mut out, rect, policy.fill);
        let mut rows = (usize::MAX, 0);
        let mut cols = (usize::MAX, 0);
        let mut changed = 0;
        for y in 0..20 {
            for x in 0..24 {
                let diff = (0..3).any(|c| out.data()[c * 480 + y * 24 + x] != img.data()[c * 480 + y * 24 + x]);
                if diff {
                    changed += 1;
                    rows = (rows.0.min(y), rows.1.max(y));
                    cols = (cols.0.min(x), cols.1.max(x));
                    for c in 0..3 {
                        assert_eq!(out.data()[c * 480 + y * 24 + x], policy.fill[c]);
                    }
                }
            }
        }
        let (h, w) = (rows.1 - rows.0 + 1, cols.1 - cols.0 + 1);
        assert_eq!(changed, h * w, "trial {trial}: diff mask is not one rectangle");
        let area = changed as f64 / 480.0;
        assert!((0.02..=0.2).contains(&area), "trial {trial}: area {area}");
        assert_eq!((rect.height, rect.width), (h, w));
    }
}
