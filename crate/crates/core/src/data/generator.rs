use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{CandidateRecord, HistoryEntry, InteractionRecord, JobRecord, SECONDS_PER_DAY};
use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub users: usize,
    pub jobs: usize,
    /// Number of impression groups, one positive each.
    pub positives: usize,
    pub categories: usize,
    pub vocab_size: usize,
    /// Terms shared by every category.
    pub generic_terms: usize,
    pub negative_ratio: usize,
    /// Jobs shown alongside each positive.
    pub exposure_size: usize,
    pub mean_history: f64,
    /// Probabilities of 1, 2 and 3 word queries.
    pub query_length_probs: [f64; 3],
    pub days: u64,
    pub first_day: u64,
    pub zero_history_fraction: f64,
    pub low_signal_resume_fraction: f64,
    pub low_signal_resume_length: usize,
    /// Probability that a positive is drawn from the user's intention
    /// categories rather than uniformly.
    pub intention_strength: f64,
    pub max_intentions: usize,
    pub resume_length: [usize; 2],
    pub description_length: [usize; 2],
    /// Share of on-topic terms in descriptions and informative resumes.
    pub on_topic: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            users: 5000,
            jobs: 20_000,
            positives: 30_000,
            categories: 50,
            vocab_size: 2000,
            generic_terms: 100,
            negative_ratio: 8,
            exposure_size: 10,
            mean_history: 16.5,
            query_length_probs: [0.6, 0.3, 0.1],
            days: 10,
            first_day: 0,
            zero_history_fraction: 0.1,
            low_signal_resume_fraction: 0.3,
            low_signal_resume_length: 3,
            intention_strength: 0.8,
            max_intentions: 3,
            resume_length: [8, 16],
            description_length: [8, 16],
            on_topic: 0.7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.jobs == 0 || self.positives == 0 || self.categories == 0 || self.days == 0 {
            bail!(Config, "users, jobs, positives, categories and days must be positive");
        }
        if self.generic_terms >= self.vocab_size || self.categories > self.vocab_size - self.generic_terms {
            bail!(
                Config,
                "{} categories do not fit into {} vocabulary terms with {} generic terms",
                self.categories,
                self.vocab_size,
                self.generic_terms
            );
        }
        if self.generic_terms == 0 && self.low_signal_resume_fraction > 0.0 {
            bail!(Config, "low-signal resumes need generic terms");
        }
        for (name, p) in [
            ("zero_history_fraction", self.zero_history_fraction),
            ("low_signal_resume_fraction", self.low_signal_resume_fraction),
            ("intention_strength", self.intention_strength),
            ("on_topic", self.on_topic),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "{name} = {p} outside [0, 1]");
            }
        }
        let total: f64 = self.query_length_probs.iter().sum();
        if self.query_length_probs.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            bail!(Config, "query_length_probs must be non-negative and sum to 1");
        }
        if !(self.mean_history > 0.0) {
            bail!(Config, "mean_history must be positive");
        }
        for (name, [lo, hi]) in [("resume_length", self.resume_length), ("description_length", self.description_length)] {
            if lo == 0 || lo > hi {
                bail!(Config, "{name} range [{lo}, {hi}] is invalid");
            }
        }
        if self.max_intentions == 0 || self.max_intentions > self.categories {
            bail!(Config, "max_intentions must lie in 1..={}", self.categories);
        }
        if self.negative_ratio == 0 || self.exposure_size == 0 || self.low_signal_resume_length == 0 {
            bail!(Config, "negative_ratio, exposure_size and low_signal_resume_length must be positive");
        }
        if self.exposure_size >= self.jobs {
            bail!(Config, "exposure_size must be smaller than the number of jobs");
        }
        Ok(())
    }
}

/// Generator latents. Never written next to the records the model reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub job_category: Vec<u32>,
    /// Intention categories per user; the first is the primary one.
    pub user_intentions: Vec<Vec<u32>>,
    pub low_signal_users: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticData {
    /// Ordinary vocabulary terms in id order.
    pub vocabulary: Vec<String>,
    pub candidates: Vec<CandidateRecord>,
    pub jobs: Vec<JobRecord>,
    pub interactions: Vec<InteractionRecord>,
    pub truth: GroundTruth,
}

/// A positive together with the jobs exposed next to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExposureGroup {
    pub user_id: u32,
    pub positive_job: u32,
    pub impression_id: u64,
    pub timestamp: u64,
    pub exposure: Vec<u32>,
}

/// Emits each group's positive followed by up to `ratio` negatives drawn
/// without replacement from its exposure list. Jobs from the user's search
/// channel are never used as negatives; groups left without negatives are
/// dropped.
pub fn sample_negatives<R: Rng>(
    groups: &[ExposureGroup],
    search_channel: &BTreeMap<u32, BTreeSet<u32>>,
    ratio: usize,
    rng: &mut R,
) -> Vec<InteractionRecord> {
    let empty = BTreeSet::new();
    let mut out = Vec::with_capacity(groups.len() * (ratio + 1));
    for g in groups {
        let searched = search_channel.get(&g.user_id).unwrap_or(&empty);
        let mut seen = BTreeSet::new();
        let pool: Vec<u32> = g
            .exposure
            .iter()
            .copied()
            .filter(|j| *j != g.positive_job && !searched.contains(j) && seen.insert(*j))
            .collect();
        if pool.is_empty() {
            log::warn!("impression {} of user {} has no usable exposure; group dropped", g.impression_id, g.user_id);
            continue;
        }
        let record = |job_id, label| InteractionRecord {
            user_id: g.user_id,
            job_id,
            label,
            impression_id: g.impression_id,
            timestamp: g.timestamp,
        };
        out.push(record(g.positive_job, 1));
        out.extend(pool.choose_multiple(rng, ratio).map(|j| record(*j, 0)));
    }
    out
}

struct Pools {
    generic: Range<usize>,
    categories: Vec<Range<usize>>,
}

impl Pools {
    fn new(cfg: &GeneratorConfig) -> Self {
        let topical = cfg.vocab_size - cfg.generic_terms;
        let categories = (0..cfg.categories)
            .map(|c| cfg.generic_terms + c * topical / cfg.categories..cfg.generic_terms + (c + 1) * topical / cfg.categories)
            .collect();
        Self {
            generic: 0..cfg.generic_terms,
            categories,
        }
    }

    fn term(&self, rng: &mut ChaCha8Rng, category: u32, on_topic: f64) -> usize {
        if self.generic.is_empty() || rng.random_bool(on_topic) {
            rng.random_range(self.categories[category as usize].clone())
        } else {
            rng.random_range(self.generic.clone())
        }
    }
}

fn join(vocab: &[String], terms: impl IntoIterator<Item = usize>) -> String {
    let mut out = String::new();
    for t in terms {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&vocab[t]);
    }
    out
}

/// Draws a synthetic recruitment log with a planted search-history signal.
pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let vocabulary: Vec<String> = (0..cfg.vocab_size).map(|i| format!("w{i:04}")).collect();
    let pools = Pools::new(cfg);
    let span = cfg.first_day * SECONDS_PER_DAY..(cfg.first_day + cfg.days) * SECONDS_PER_DAY;

    let job_category: Vec<u32> = (0..cfg.jobs).map(|_| rng.random_range(0..cfg.categories as u32)).collect();
    let mut jobs_by_category = vec![Vec::new(); cfg.categories];
    for (j, c) in job_category.iter().enumerate() {
        jobs_by_category[*c as usize].push(j as u32);
    }
    let jobs = job_category
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let len = rng.random_range(cfg.description_length[0]..=cfg.description_length[1]);
            let terms: Vec<usize> = (0..len).map(|_| pools.term(rng, *c, cfg.on_topic)).collect();
            JobRecord {
                job_id: j as u32,
                description: join(&vocabulary, terms),
            }
        })
        .collect();
    let pick_job = |rng: &mut ChaCha8Rng, category: u32| -> u32 {
        match jobs_by_category[category as usize].choose(rng) {
            Some(j) => *j,
            None => rng.random_range(0..cfg.jobs as u32),
        }
    };

    let all_categories: Vec<u32> = (0..cfg.categories as u32).collect();
    let history_length = Poisson::new(cfg.mean_history).map_err(|e| crate::Error::Config(format!("mean_history: {e}")))?;
    let mut user_intentions = Vec::with_capacity(cfg.users);
    let mut low_signal_users = Vec::with_capacity(cfg.users);
    let mut candidates = Vec::with_capacity(cfg.users);
    let mut search_channel: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for u in 0..cfg.users as u32 {
        let n = rng.random_range(1..=cfg.max_intentions);
        let intentions: Vec<u32> = all_categories.choose_multiple(rng, n).copied().collect();
        let mut history = Vec::new();
        if !rng.random_bool(cfg.zero_history_fraction) {
            let len = (history_length.sample(rng) as usize).max(1);
            for _ in 0..len {
                let c = *intentions.choose(rng).expect("non-empty");
                let r: f64 = rng.random();
                let words = if r < cfg.query_length_probs[0] {
                    1
                } else if r < cfg.query_length_probs[0] + cfg.query_length_probs[1] {
                    2
                } else {
                    3
                };
                let terms: Vec<usize> = (0..words).map(|_| pools.term(rng, c, 1.0)).collect();
                history.push(HistoryEntry {
                    query: join(&vocabulary, terms),
                    job_id: pick_job(rng, c),
                    timestamp: rng.random_range(span.clone()),
                });
            }
            history.sort_by_key(|h| h.timestamp);
        }
        search_channel.insert(u, history.iter().map(|h| h.job_id).collect());
        let low_signal = rng.random_bool(cfg.low_signal_resume_fraction);
        let resume = if low_signal {
            let terms: Vec<usize> = (0..cfg.low_signal_resume_length).map(|_| rng.random_range(pools.generic.clone())).collect();
            join(&vocabulary, terms)
        } else {
            let len = rng.random_range(cfg.resume_length[0]..=cfg.resume_length[1]);
            let terms: Vec<usize> = (0..len)
                .map(|_| {
                    let c = *intentions.choose(rng).expect("non-empty");
                    pools.term(rng, c, cfg.on_topic)
                })
                .collect();
            join(&vocabulary, terms)
        };
        candidates.push(CandidateRecord {
            user_id: u,
            resume,
            history,
        });
        user_intentions.push(intentions);
        low_signal_users.push(low_signal);
    }

    let mut groups = Vec::with_capacity(cfg.positives);
    for p in 0..cfg.positives {
        let user_id = rng.random_range(0..cfg.users as u32);
        let searched = &search_channel[&user_id];
        let mut positive_job = 0;
        for attempt in 0..32 {
            let c = if rng.random_bool(cfg.intention_strength) {
                *user_intentions[user_id as usize].choose(rng).expect("non-empty")
            } else {
                rng.random_range(0..cfg.categories as u32)
            };
            positive_job = if attempt < 16 { pick_job(rng, c) } else { rng.random_range(0..cfg.jobs as u32) };
            if !searched.contains(&positive_job) {
                break;
            }
        }
        let mut exposure = Vec::with_capacity(cfg.exposure_size);
        while exposure.len() < cfg.exposure_size {
            let j = rng.random_range(0..cfg.jobs as u32);
            if j != positive_job && !exposure.contains(&j) {
                exposure.push(j);
            }
        }
        groups.push(ExposureGroup {
            user_id,
            positive_job,
            impression_id: p as u64,
            timestamp: rng.random_range(span.clone()),
            exposure,
        });
    }
    let mut interactions = sample_negatives(&groups, &search_channel, cfg.negative_ratio, rng);
    interactions.shuffle(rng);
    interactions.sort_by_key(|r| (r.timestamp, r.impression_id, core::cmp::Reverse(r.label)));

    Ok(SyntheticData {
        vocabulary,
        candidates,
        jobs,
        interactions,
        truth: GroundTruth {
            job_category,
            user_intentions,
            low_signal_users,
        },
    })
}
