use std::collections::{BTreeMap, BTreeSet};

use pjfit_core::data::{
    generate_synthetic, sample_negatives, temporal_split, Corpus, ExposureGroup, GeneratorConfig, ImpressionGroup, InteractionRecord, SplitConfig,
    SECONDS_PER_DAY,
};
use pjfit_core::encoders::Vocabulary;
use pjfit_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> GeneratorConfig {
    GeneratorConfig {
        users: 300,
        jobs: 800,
        positives: 1200,
        categories: 10,
        vocab_size: 200,
        generic_terms: 20,
        ..Default::default()
    }
}

#[test]
fn desk_scale_statistics_hit_targets() {
    let cfg = GeneratorConfig::default();
    assert_eq!(cfg.users, 5000);
    let data = generate_synthetic(&cfg, 1).unwrap();
    let queries: Vec<usize> = data
        .candidates
        .iter()
        .flat_map(|c| &c.history)
        .map(|h| h.query.split_whitespace().count())
        .collect();
    let mean_query = queries.iter().sum::<usize>() as f64 / queries.len() as f64;
    assert!((mean_query - 1.5).abs() <= 0.1, "mean query length {mean_query}");

    let lengths: Vec<usize> = data.candidates.iter().map(|c| c.history.len()).filter(|&l| l > 0).collect();
    let mean_history = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    assert!((mean_history - 16.5).abs() <= 1.0, "mean history length {mean_history}");
    let zero = data.candidates.len() - lengths.len();
    assert!((zero as f64 / 5000.0 - 0.1).abs() < 0.02, "{zero} users without history");

    let groups = ImpressionGroup::collect(&data.interactions).unwrap();
    assert!(groups.iter().all(|g| g.positives() == 1));
    let negatives = data.interactions.len() - groups.len();
    let ratio = negatives as f64 / groups.len() as f64;
    assert!((ratio - 8.0).abs() <= 0.5, "ratio {ratio}");

    let searched: BTreeMap<u32, BTreeSet<u32>> = data
        .candidates
        .iter()
        .map(|c| (c.user_id, c.history.iter().map(|h| h.job_id).collect()))
        .collect();
    assert!(data.interactions.iter().filter(|r| r.label == 0).all(|r| !searched[&r.user_id].contains(&r.job_id)));
}

#[test]
fn generation_is_deterministic_and_referentially_sound() {
    let a = generate_synthetic(&small(), 5).unwrap();
    assert_eq!(a, generate_synthetic(&small(), 5).unwrap());
    assert_ne!(a.interactions, generate_synthetic(&small(), 6).unwrap().interactions);
    let vocab = Vocabulary::from_tokens(a.vocabulary.iter().cloned()).unwrap();
    let corpus = Corpus::build(vocab, &a.candidates, &a.jobs, u64::MAX).unwrap();
    corpus.check_references(&a.interactions).unwrap();
    assert!(a.interactions.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    for c in &a.candidates {
        assert!(!c.resume.is_empty());
        assert!(c.history.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert!(c.history.iter().all(|h| (1..=3).contains(&h.query.split_whitespace().count())));
    }
    let truth = &a.truth;
    assert_eq!(truth.job_category.len(), 800);
    assert!(truth.user_intentions.iter().all(|i| !i.is_empty() && i.len() <= 3));
}

#[test]
fn planted_signal_concentrates_positives() {
    let data = generate_synthetic(&small(), 7).unwrap();
    let positives: Vec<_> = data.interactions.iter().filter(|r| r.label == 1).collect();
    let on_intention = positives
        .iter()
        .filter(|r| data.truth.user_intentions[r.user_id as usize].contains(&data.truth.job_category[r.job_id as usize]))
        .count();
    assert!(on_intention as f64 / positives.len() as f64 > 0.75);
}

#[test]
fn infeasible_configs_are_rejected() {
    for cfg in [
        GeneratorConfig { categories: 190, ..small() },
        GeneratorConfig { users: 0, ..small() },
        GeneratorConfig { query_length_probs: [0.5, 0.5, 0.5], ..small() },
        GeneratorConfig { exposure_size: 800, ..small() },
    ] {
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Config(_))));
    }
}

fn exposure(positive: u32, exposure: Vec<u32>) -> ExposureGroup {
    ExposureGroup {
        user_id: 0,
        positive_job: positive,
        impression_id: 1,
        timestamp: 0,
        exposure,
    }
}

#[test]
fn negative_sampling_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let none = BTreeMap::new();
    let out = sample_negatives(&[exposure(0, (1..=8).collect())], &none, 8, &mut rng);
    assert_eq!(out.len(), 9);
    assert_eq!(out.iter().filter(|r| r.label == 0).map(|r| r.job_id).collect::<BTreeSet<_>>(), (1..=8).collect());

    let searched = BTreeMap::from([(0, BTreeSet::from([3, 4, 5]))]);
    for _ in 0..50 {
        let out = sample_negatives(&[exposure(0, (0..20).collect())], &searched, 8, &mut rng);
        assert_eq!(out.len(), 9);
        assert!(out.iter().all(|r| r.label == 1 || ![0, 3, 4, 5].contains(&r.job_id)));
        assert!(out.iter().all(|r| r.impression_id == 1));
    }
    assert!(sample_negatives(&[exposure(0, vec![])], &none, 8, &mut rng).is_empty());
    assert!(sample_negatives(&[exposure(3, vec![3, 4])], &searched, 8, &mut rng).is_empty());
}

#[test]
fn realized_ratio_over_a_thousand_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let groups: Vec<ExposureGroup> = (0..1000)
        .map(|i| ExposureGroup {
            impression_id: i,
            ..exposure(i as u32 % 50, (0..10).map(|j| (i as u32 + 7 * j) % 60).collect())
        })
        .collect();
    let searched = BTreeMap::from([(0, BTreeSet::from([1, 2]))]);
    let out = sample_negatives(&groups, &searched, 8, &mut rng);
    let kept = out.iter().filter(|r| r.label == 1).count();
    let ratio = (out.len() - kept) as f64 / kept as f64;
    assert!((ratio - 8.0).abs() <= 0.5, "{ratio}");
}

#[test]
fn split_hides_history_from_evaluation_days() {
    let data = generate_synthetic(&small(), 8).unwrap();
    let cfg = SplitConfig {
        first_day: 0,
        days: 10,
        val_days: 1,
        test_days: 1,
    };
    let split = temporal_split(&data.interactions, &cfg).unwrap();
    assert_eq!(split.history_cutoff, 8 * SECONDS_PER_DAY);
    assert!(split.train.iter().all(|r| r.timestamp / SECONDS_PER_DAY <= 7));
    assert!(split.val.iter().all(|r| r.timestamp / SECONDS_PER_DAY == 8));
    assert!(split.test.iter().all(|r| r.timestamp / SECONDS_PER_DAY == 9));
    assert_eq!(split.train.len() + split.val.len() + split.test.len(), data.interactions.len());

    let vocab = Vocabulary::from_tokens(data.vocabulary.iter().cloned()).unwrap();
    let corpus = Corpus::build(vocab, &data.candidates, &data.jobs, split.history_cutoff).unwrap();
    for (c, view) in data.candidates.iter().zip(corpus.users()) {
        let visible: Vec<u32> = c.history.iter().filter(|h| h.timestamp < split.history_cutoff).map(|h| h.job_id).collect();
        assert_eq!(view.history.iter().map(|h| h.job_id).collect::<Vec<_>>(), visible);
    }
}

proptest! {
    #[test]
    fn splits_are_monotone_and_keep_groups_whole(days in 3u64..12, stamps in prop::collection::vec((0u64..12 * 86_400, 1usize..4), 1..60)) {
        let mut records = Vec::new();
        for (i, (ts, n)) in stamps.iter().enumerate() {
            let ts = ts % (days * SECONDS_PER_DAY);
            for j in 0..*n {
                records.push(InteractionRecord { user_id: 0, job_id: j as u32, label: u8::from(j == 0), impression_id: i as u64, timestamp: ts });
            }
        }
        let cfg = SplitConfig { first_day: 0, days, val_days: 1, test_days: 1 };
        let split = temporal_split(&records, &cfg).unwrap();
        let max = |r: &[InteractionRecord]| r.iter().map(|x| x.timestamp).max();
        let min = |r: &[InteractionRecord]| r.iter().map(|x| x.timestamp).min();
        if let (Some(a), Some(b)) = (max(&split.train), min(&split.val)) { prop_assert!(a < b); }
        if let (Some(a), Some(b)) = (max(&split.val), min(&split.test)) { prop_assert!(a < b); }
        if let (Some(a), Some(b)) = (max(&split.train), min(&split.test)) { prop_assert!(a < b); }
        let where_is = |id: u64| -> Vec<usize> {
            [&split.train, &split.val, &split.test].iter().enumerate().filter(|(_, s)| s.iter().any(|r| r.impression_id == id)).map(|(i, _)| i).collect()
        };
        for i in 0..stamps.len() as u64 {
            prop_assert_eq!(where_is(i).len(), 1);
        }
    }
}
