use convseg_core::metrics::{ciou, giou, per_concept_report, EvalPair};
use convseg_core::{BinaryMask, ConceptFamily};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pixel-by-pixel counting, written without any library set operations.
fn oracle_counts(gt: &BinaryMask, pred: &BinaryMask) -> (u64, u64) {
    let mut i = 0;
    let mut u = 0;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let (a, b) = (gt.get(y, x), pred.get(y, x));
            if a && b {
                i += 1;
            }
            if a || b {
                u += 1;
            }
        }
    }
    (i, u)
}

fn oracle_giou(pairs: &[EvalPair]) -> f64 {
    let mut s = 0.0;
    for p in pairs {
        let (i, u) = oracle_counts(&p.gt, &p.pred);
        s += if u == 0 { 1.0 } else { i as f64 / u as f64 };
    }
    s / pairs.len() as f64
}

fn oracle_ciou(pairs: &[EvalPair]) -> f64 {
    let (mut si, mut su) = (0u64, 0u64);
    for p in pairs {
        let (i, u) = oracle_counts(&p.gt, &p.pred);
        si += i;
        su += u;
    }
    if su == 0 {
        1.0
    } else {
        si as f64 / su as f64
    }
}

fn random_pairs(seed: u64, n: usize) -> Vec<EvalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let h = rng.gen_range(1..=64);
            let w = rng.gen_range(1..=64);
            let pg: f64 = rng.gen_range(0.0..1.0);
            let pp: f64 = rng.gen_range(0.0..1.0);
            let gt = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(pg));
            let pred = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(pp));
            EvalPair {
                sample_id: format!("p{k}"),
                concept: ConceptFamily::ALL[k % 5],
                gt,
                pred,
            }
        })
        .collect()
}

#[test]
fn metrics_match_pixel_oracle_on_random_pairs() {
    let pairs = random_pairs(2024, 200);
    assert!((giou(&pairs).unwrap() / 100.0 - oracle_giou(&pairs)).abs() < 1e-9);
    assert!((ciou(&pairs).unwrap() / 100.0 - oracle_ciou(&pairs)).abs() < 1e-9);
}

#[test]
fn equal_unions_make_giou_equal_ciou() {
    // every pair has union 20 (ground truth covers the first 20 pixels)
    let pairs: Vec<EvalPair> = [3usize, 11, 20, 0, 17]
        .iter()
        .enumerate()
        .map(|(k, &i)| EvalPair {
            sample_id: k.to_string(),
            concept: ConceptFamily::Entities,
            gt: BinaryMask::from_fn(1, 32, |_, x| x < 20),
            pred: BinaryMask::from_fn(1, 32, |_, x| x < i),
        })
        .collect();
    assert!((giou(&pairs).unwrap() - ciou(&pairs).unwrap()).abs() < 1e-9);
}

proptest! {
    #[test]
    fn permutation_invariance(seed in any::<u64>(), rot in 0usize..20) {
        let pairs = random_pairs(seed, 20);
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(rot);
        shuffled.reverse();
        prop_assert!((giou(&pairs).unwrap() - giou(&shuffled).unwrap()).abs() < 1e-9);
        prop_assert!((ciou(&pairs).unwrap() - ciou(&shuffled).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn overall_is_weighted_concept_mean(seed in any::<u64>(), n in 1usize..30) {
        let pairs = random_pairs(seed, n);
        let r = per_concept_report(&pairs).unwrap();
        let weighted: f64 = r.per_concept_giou.iter().map(|(c, g)| g * r.n[c] as f64).sum::<f64>() / n as f64;
        prop_assert!((weighted - r.overall_giou).abs() < 1e-9);
        prop_assert_eq!(r.n.values().sum::<usize>(), n);
        for v in r.per_concept_giou.values().chain(r.per_concept_ciou.values()) {
            prop_assert!((0.0..=100.0).contains(v));
        }
    }

    #[test]
    fn iou_is_symmetric(seed in any::<u64>()) {
        for p in random_pairs(seed, 5) {
            let ab = convseg_core::binary_iou(&p.gt, &p.pred).unwrap();
            let ba = convseg_core::binary_iou(&p.pred, &p.gt).unwrap();
            prop_assert_eq!(ab, ba);
            if !p.gt.is_empty() {
                prop_assert_eq!(convseg_core::binary_iou(&p.gt, &p.gt).unwrap(), 1.0);
            }
        }
    }
}

#[test]
fn iou_grows_with_intersection_at_fixed_union() {
    let gt = BinaryMask::from_fn(1, 40, |_, x| x < 30);
    let mut last = -1.0;
    for i in 0..=30 {
        let pred = BinaryMask::from_fn(1, 40, |_, x| x < i);
        let v = convseg_core::binary_iou(&gt, &pred).unwrap();
        assert!(v > last);
        last = v;
    }
}
