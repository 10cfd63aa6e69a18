//! Category proportions of the two-phase sampler under an exact binomial test.

use convseg_core::{
    ConceptFamily, DatasetManifest, ImageRecord, MaskRle, Provenance, Sample, Split,
};
use convseg_net::{sample_batch, DataGroup, DrawCategory, GroupId, Phase};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, Discrete};

const DRAWS: usize = 30_000;
const ALPHA: f64 = 0.001;

fn sample(id: String, negative: bool) -> Sample {
    let mut mask = MaskRle::empty(4, 4);
    if !negative {
        mask.counts = vec![5, 6, 5];
    }
    Sample {
        sample_id: id,
        image: ImageRecord {
            image_id: "img".into(),
            uri: "img.png".into(),
            width: 4,
            height: 4,
        },
        prompt: "the object".into(),
        mask,
        concept: ConceptFamily::Entities,
        split: Split::Train,
        provenance: Provenance::SyntheticTest,
        is_negative: negative,
    }
}

/// Deliberately unbalanced pool sizes: proportions must not follow them.
fn groups() -> Vec<DataGroup> {
    let sizes = [40, 25, 10, 7, 3];
    GroupId::ALL
        .iter()
        .zip(sizes)
        .map(|(&id, n)| {
            let neg = id == GroupId::ConversationalNeg;
            let samples = (0..n).map(|i| sample(format!("{id}-{i}"), neg)).collect();
            DataGroup::new(id, DatasetManifest::new(samples)).unwrap()
        })
        .collect()
}

/// Exact two-sided p-value: total mass of outcomes no more likely than `k`.
fn binomial_two_sided(k: u64, n: u64, p: f64) -> f64 {
    let dist = Binomial::new(p, n).unwrap();
    let observed = dist.pmf(k);
    let cutoff = observed * (1.0 + 1e-7);
    let total: f64 = (0..=n).map(|j| dist.pmf(j)).filter(|&m| m <= cutoff).sum();
    total.min(1.0)
}

#[test]
fn exact_test_rejects_obvious_bias() {
    assert!(binomial_two_sided(12_000, DRAWS as u64, 1.0 / 3.0) < ALPHA);
    assert!(binomial_two_sided(10_000, DRAWS as u64, 1.0 / 3.0) > 0.99);
    // symmetric case against a hand-computed value: P(X <= 1 or X >= 9) for Bin(10, 1/2)
    let p = binomial_two_sided(1, 10, 0.5);
    assert!((p - 22.0 / 1024.0).abs() < 1e-12, "{p}");
}

#[test]
fn phase_two_categories_are_equal_in_proportion() {
    let g = groups();
    for seed in [0u64, 1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = sample_batch(Phase::Conversational, &g, DRAWS, &mut rng).unwrap();
        for category in [
            DrawCategory::Pretrain,
            DrawCategory::ConversationalPos,
            DrawCategory::ConversationalNeg,
        ] {
            let k = draws.iter().filter(|d| d.category == category).count() as u64;
            let p = binomial_two_sided(k, DRAWS as u64, 1.0 / 3.0);
            assert!(p >= ALPHA, "seed {seed}: {category:?} drawn {k} times, p = {p}");
        }
        assert!(draws
            .iter()
            .filter(|d| d.category == DrawCategory::ConversationalNeg)
            .all(|d| d.sample.is_negative && d.sample.mask.foreground_count() == 0));
    }
}

#[test]
fn phase_one_draws_no_conversational_samples() {
    let g = groups();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = sample_batch(Phase::Pretrain, &g, DRAWS, &mut rng).unwrap();
    assert!(draws.iter().all(|d| d.category == DrawCategory::Pretrain && d.group.is_pretraining()));
}
