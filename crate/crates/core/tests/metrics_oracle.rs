mod common;

use anet::eval::{rank_and_score, rank_gallery, Labels};
use anet::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{oracle, random_instance};

#[test]
fn random_instances_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut scored = 0;
    for _ in 0..300 {
        let inst = random_instance(&mut rng);
        let filter = rng.gen_bool(0.5);
        let (aps, cmc, excluded) = oracle(&inst, filter);
        let got = rank_and_score(
            &inst.q,
            Labels { ids: &inst.qids, cams: &inst.qcams },
            &inst.g,
            Labels { ids: &inst.gids, cams: &inst.gcams },
            filter,
        );
        if aps.is_empty() {
            assert!(got.is_err());
            continue;
        }
        let r = got.unwrap();
        scored += 1;
        assert_eq!(r.excluded_queries, excluded);
        assert_eq!(r.per_query_ap.len(), aps.len());
        for (a, b) in r.per_query_ap.iter().zip(&aps) {
            assert!((a - b).abs() <= 1e-9);
        }
        for (a, b) in r.cmc.iter().zip(&cmc) {
            assert!((a - b).abs() <= 1e-9);
        }
        let map = aps.iter().sum::<f64>() / aps.len() as f64;
        assert!((r.map - map).abs() <= 1e-9);
        assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        assert!((r.cmc.last().unwrap() - 1.0).abs() < 1e-12);
    }
    assert!(scored > 100);
}

#[test]
fn two_of_three_relevant_at_ranks_one_and_three() {
    let q = Tensor::new(&[1, 1], vec![0.0]);
    let g = Tensor::new(&[3, 1], vec![0.1, 0.2, 0.3]);
    let r = rank_and_score(
        &q,
        Labels { ids: &[5], cams: &[0] },
        &g,
        Labels { ids: &[5, 6, 5], cams: &[1, 1, 1] },
        true,
    )
    .unwrap();
    assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((r.map - 0.833_333_333_333).abs() < 1e-9);
    assert_eq!(r.r1, 1.0);
}

#[test]
fn orthogonal_transform_keeps_rankings() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let unit = |rng: &mut ChaCha8Rng, n: usize| {
        let mut t = Tensor::from_fn(&[n, 2], |_| rng.gen_range(-1.0f32..1.0));
        anet::eval::l2_normalize_rows(&mut t).unwrap();
        t
    };
    let q = unit(&mut rng, 5);
    let g = unit(&mut rng, 12);
    // Rotation by a quarter turn is exact in floating point.
    let rot = |t: &Tensor<f32>| {
        let mut out = t.clone();
        for r in out.data_mut().chunks_mut(2) {
            let (x, y) = (r[0], r[1]);
            r[0] = -y;
            r[1] = x;
        }
        out
    };
    let (rq, rg) = (rot(&q), rot(&g));
    for i in 0..5 {
        assert_eq!(rank_gallery(q.row(i), &g), rank_gallery(rq.row(i), &rg));
    }
}
