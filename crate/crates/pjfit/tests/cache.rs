use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use pjfit::cache::{decode_cache, encode_cache, load_cache, save_cache, score_online, IntentionCache};
use pjfit_core::micro::micro_config;
use pjfit_core::model::{Dimensions, HistoryItem, IntentionState, JobView, Model, ModelConfig, UserView, Variant};
use pjfit_core::nn::Ctx;
use pjfit_core::tensor::Tape;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: Dimensions = Dimensions {
    vocab_size: 40,
    num_users: 24,
    num_jobs: 50,
};

fn config(variant: Variant) -> ModelConfig {
    ModelConfig {
        l_max: 64,
        variant,
        ..micro_config()
    }
}

fn tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(4..DIMS.vocab_size as u32)).collect()
}

fn item(rng: &mut ChaCha8Rng) -> HistoryItem {
    let q = rng.random_range(1..4);
    HistoryItem {
        query: tokens(rng, q),
        job_id: rng.random_range(0..DIMS.num_jobs as u32),
    }
}

fn user(rng: &mut ChaCha8Rng, user_id: u32, history: usize) -> UserView {
    let n = rng.random_range(1..8);
    UserView {
        user_id,
        resume: tokens(rng, n),
        history: (0..history).map(|_| item(rng)).collect(),
    }
}

fn jobs(rng: &mut ChaCha8Rng) -> Vec<JobView> {
    (0..DIMS.num_jobs as u32)
        .map(|job_id| {
            let n = rng.random_range(1..8);
            JobView {
                job_id,
                description: tokens(rng, n),
            }
        })
        .collect()
}

fn users(rng: &mut ChaCha8Rng) -> Vec<UserView> {
    (0..DIMS.num_users as u32)
        .map(|u| {
            let len = if u % 6 == 0 { 0 } else { rng.random_range(1..20) };
            user(rng, u, len)
        })
        .collect()
}

fn impression(rng: &mut ChaCha8Rng, jobs: &[JobView], n: usize) -> Vec<JobView> {
    let mut out: Vec<JobView> = Vec::new();
    while out.len() < n {
        let j = &jobs[rng.random_range(0..jobs.len())];
        if !out.iter().any(|o| o.job_id == j.job_id) {
            out.push(j.clone());
        }
    }
    out
}

#[test]
fn cached_scores_equal_the_full_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (users, jobs) = (users(&mut rng), jobs(&mut rng));
    for variant in Variant::ALL {
        let model = Model::new(config(variant), DIMS, 5).unwrap();
        let cache = IntentionCache::new(3600);
        cache.refresh(&model, &users, 100).unwrap();
        let snap = cache.snapshot();
        for _ in 0..100 {
            let u = &users[rng.random_range(0..users.len())];
            let n = rng.random_range(1..12);
            let imp = impression(&mut rng, &jobs, n);
            let online = score_online(&model, &snap, u, &imp).unwrap();
            assert!(online.cache_hit);
            assert_eq!(online.ranked.len(), n);
            for pair in &online.ranked {
                let full = model.score_pair(u, &jobs[pair.job_id as usize]).unwrap();
                assert!((full.y_hat - pair.y_hat).abs() < 1e-9, "{variant}: {} vs {}", full.y_hat, pair.y_hat);
            }
        }
    }
}

#[test]
fn ranking_is_descending_with_job_id_tie_break() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (users, jobs) = (users(&mut rng), jobs(&mut rng));
    let model = Model::new(config(Variant::Full), DIMS, 6).unwrap();
    let cache = IntentionCache::new(3600);
    cache.refresh(&model, &users, 0).unwrap();
    let snap = cache.snapshot();
    let imp = impression(&mut rng, &jobs, 9);
    let online = score_online(&model, &snap, &users[1], &imp).unwrap();
    assert_eq!(online.ranked.len(), 9);
    for w in online.ranked.windows(2) {
        assert!(w[0].y_hat > w[1].y_hat || (w[0].y_hat == w[1].y_hat && w[0].job_id < w[1].job_id));
    }
    // Identical descriptions under a text-only model tie exactly.
    let text = Model::new(config(Variant::TextOnly), DIMS, 6).unwrap();
    let same: Vec<JobView> = [7u32, 3, 5]
        .iter()
        .map(|&job_id| JobView {
            job_id,
            description: vec![9, 10],
        })
        .collect();
    let online = score_online(&text, &snap, &users[1], &same).unwrap();
    assert_eq!(online.ranked.iter().map(|p| p.job_id).collect::<Vec<_>>(), vec![3, 5, 7]);
    assert!(score_online(&model, &snap, &users[1], &[]).unwrap().ranked.is_empty());
}

#[test]
fn online_cost_does_not_depend_on_history_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let jobs = jobs(&mut rng);
    let model = Model::new(config(Variant::Full), DIMS, 7).unwrap();
    let base = user(&mut rng, 0, 0);
    let mut cost = Vec::new();
    let mut offline = Vec::new();
    for len in [4, 64] {
        let u = UserView {
            history: (0..len).map(|_| item(&mut rng)).collect(),
            ..base.clone()
        };
        let state = model.intention_state(&u, 0).unwrap();
        assert_eq!(state.history_len, len);
        let (_, flops) = model.score_with_state(&u, &jobs[3], &state).unwrap();
        cost.push(flops);
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, model.params());
        model.record_intention(&mut ctx, &u).unwrap();
        offline.push(tape.flops());
    }
    assert_eq!(cost[0], cost[1]);
    assert!(offline[1] > 10 * offline[0], "{offline:?}");
}

#[test]
fn refresh_is_deterministic_and_counts_generations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let users = users(&mut rng);
    let model = Model::new(config(Variant::Full), DIMS, 8).unwrap();
    let cache = IntentionCache::new(21_600);
    assert_eq!(cache.snapshot().generation, 0);
    assert_eq!(cache.refresh(&model, &users, 10).unwrap(), 1);
    let first = cache.snapshot();
    assert_eq!(cache.refresh(&model, &users, 10).unwrap(), 2);
    let second = cache.snapshot();
    assert_eq!(first.states, second.states);
    assert_eq!(second.states.len(), users.len());
    for u in &users {
        let state = &second.states[&u.user_id];
        assert_eq!(state.is_empty(), u.history.is_empty());
        if u.history.is_empty() {
            assert_eq!(**state, IntentionState::empty(10));
        }
    }
}

#[test]
fn appending_history_changes_only_that_user() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut users = users(&mut rng);
    let model = Model::new(config(Variant::Full), DIMS, 9).unwrap();
    let cache = IntentionCache::new(3600);
    cache.refresh(&model, &users, 0).unwrap();
    let before = cache.snapshot();
    let extra = item(&mut rng);
    users[5].history.push(extra);
    cache.refresh(&model, &users, 0).unwrap();
    let after = cache.snapshot();
    for u in &users {
        let oracle = model.intention_state(u, 0).unwrap();
        assert_eq!(*after.states[&u.user_id], oracle);
        if u.user_id == 5 {
            assert_ne!(after.states[&5], before.states[&5]);
        } else {
            assert_eq!(after.states[&u.user_id], before.states[&u.user_id]);
        }
    }
}

#[test]
fn cache_miss_falls_back_to_empty_history() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (users, jobs) = (users(&mut rng), jobs(&mut rng));
    let model = Model::new(config(Variant::Full), DIMS, 10).unwrap();
    let cache = IntentionCache::new(3600);
    cache.refresh(&model, &users[..3], 0).unwrap();
    let u = &users[7];
    assert!(!u.history.is_empty());
    let online = score_online(&model, &cache.snapshot(), u, &jobs[..4]).unwrap();
    assert!(!online.cache_hit);
    let bare = UserView {
        history: Vec::new(),
        ..u.clone()
    };
    for pair in &online.ranked {
        assert_eq!(pair.y_hat, model.score_pair(&bare, &jobs[pair.job_id as usize]).unwrap().y_hat);
    }
}

#[test]
fn dump_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let users = users(&mut rng);
    let model = Model::new(config(Variant::Full), DIMS, 11).unwrap();
    let cache = IntentionCache::new(3600);
    cache.refresh(&model, &users, 123).unwrap();
    cache.refresh(&model, &users, 456).unwrap();
    let snap = cache.snapshot();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.bin");
    save_cache(&path, &snap).unwrap();
    let back = load_cache(&path).unwrap();
    assert_eq!(back.generation, 2);
    assert_eq!(back.computed_at, 456);
    assert_eq!(encode_cache(&back), std::fs::read(&path).unwrap());
    for (id, state) in &snap.states {
        let b = &back.states[id];
        for (x, y) in [(&state.c_j, &b.c_j), (&state.c_j_prime, &b.c_j_prime), (&state.c_q, &b.c_q)] {
            let bits = |t: &Option<pjfit_core::tensor::Tensor>| t.as_ref().map(|t| (t.shape().to_vec(), t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
            assert_eq!(bits(x), bits(y));
        }
    }
    let mut bytes = encode_cache(&snap);
    bytes[20] ^= 0x40;
    assert!(decode_cache(&path, &bytes).is_err());
    let restored = IntentionCache::from_generation(back, 3600);
    assert_eq!(restored.refresh(&model, &users, 789).unwrap(), 3);
}

#[test]
fn readers_see_whole_generations_during_refreshes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let users = users(&mut rng);
    let model = Model::new(config(Variant::Full), DIMS, 12).unwrap();
    let cache = Arc::new(IntentionCache::new(1));
    cache.refresh(&model, &users, 1).unwrap();
    let done = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let (cache, done) = (cache.clone(), done.clone());
            thread::spawn(move || {
                let mut last = 0;
                let mut seen = 0;
                while !done.load(Ordering::Relaxed) || seen == 0 {
                    let snap = cache.snapshot();
                    assert!(snap.generation >= last);
                    last = snap.generation;
                    // Each refresh stamps its generation number as the time.
                    assert_eq!(snap.computed_at, snap.generation);
                    assert!(snap.states.values().all(|s| s.computed_at == snap.generation));
                    seen += 1;
                }
                last
            })
        })
        .collect();
    for g in 2..=20 {
        assert_eq!(cache.refresh(&model, &users, g).unwrap(), g);
    }
    done.store(true, Ordering::Relaxed);
    for r in readers {
        assert!(r.join().unwrap() <= 20);
    }
    assert_eq!(cache.snapshot().generation, 20);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cached_path_matches_full_forward_for_any_history(seed: u64, len in 0usize..40, variant in prop::sample::select(Variant::ALL.to_vec())) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jobs = jobs(&mut rng);
        let model = Model::new(config(variant), DIMS, seed).unwrap();
        let u = user(&mut rng, 3, len);
        let cache = IntentionCache::new(3600);
        cache.refresh(&model, std::slice::from_ref(&u), 0).unwrap();
        let imp = impression(&mut rng, &jobs, 5);
        let online = score_online(&model, &cache.snapshot(), &u, &imp).unwrap();
        for pair in &online.ranked {
            let full = model.score_pair(&u, &jobs[pair.job_id as usize]).unwrap();
            prop_assert!((full.y_hat - pair.y_hat).abs() < 1e-9);
        }
    }
}
