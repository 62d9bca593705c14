//! Serving path with lazily refreshed intention states.
//!
//! Intention matrices are computed offline for every user and published as
//! an immutable generation. Online scoring reads one generation snapshot and
//! runs only the per-job part of the model, whose cost depends on `k`, not
//! on the history length.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use pjfit_core::model::{IntentionState, JobView, Model, ScoredPair, UserView};
use pjfit_core::tensor::Tensor;

use crate::codec::{check_envelope, seal, Cursor};
use crate::error::{Error, Result};
use crate::manifest::write_atomic;

pub const CACHE_MAGIC: &[u8; 8] = b"PJFCACHE";
pub const CACHE_VERSION: u32 = 1;

/// One published set of intention states.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheGeneration {
    pub generation: u64,
    /// Time the states were computed for; history at or after it is unseen.
    pub computed_at: u64,
    pub states: BTreeMap<u32, Arc<IntentionState>>,
}

pub struct IntentionCache {
    current: ArcSwap<CacheGeneration>,
    refresher: Mutex<()>,
    refresh_interval: u64,
}

impl IntentionCache {
    /// An empty cache at generation 0. `refresh_interval` is in seconds.
    pub fn new(refresh_interval: u64) -> Self {
        Self::from_generation(
            CacheGeneration {
                generation: 0,
                computed_at: 0,
                states: BTreeMap::new(),
            },
            refresh_interval,
        )
    }

    pub fn from_generation(generation: CacheGeneration, refresh_interval: u64) -> Self {
        Self {
            current: ArcSwap::from_pointee(generation),
            refresher: Mutex::new(()),
            refresh_interval,
        }
    }

    pub fn refresh_interval(&self) -> u64 {
        self.refresh_interval
    }

    /// The current generation. Holding it keeps that generation alive
    /// across later refreshes.
    pub fn snapshot(&self) -> Arc<CacheGeneration> {
        self.current.load_full()
    }

    /// Recomputes every user's state with frozen `model` parameters and
    /// publishes the result as the next generation. Users without visible
    /// history get the empty sentinel state. Returns the new generation.
    pub fn refresh(&self, model: &Model, users: &[UserView], computed_at: u64) -> Result<u64> {
        let _guard = self.refresher.lock().unwrap_or_else(|e| e.into_inner());
        let mut states = BTreeMap::new();
        for user in users {
            states.insert(user.user_id, Arc::new(model.intention_state(user, computed_at)?));
        }
        let generation = self.current.load().generation + 1;
        self.current.store(Arc::new(CacheGeneration {
            generation,
            computed_at,
            states,
        }));
        log::debug!("cache generation {generation} holds {} users", users.len());
        Ok(generation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineScores {
    /// Sorted by descending score, ties by ascending job ID.
    pub ranked: Vec<ScoredPair>,
    /// Floating-point operations of all per-job forward passes.
    pub flops: u64,
    pub cache_hit: bool,
}

/// Scores an impression against a cache snapshot. `user` supplies the
/// resume for text matching; its history is not read.
pub fn score_online(model: &Model, snapshot: &CacheGeneration, user: &UserView, jobs: &[JobView]) -> Result<OnlineScores> {
    let cached = snapshot.states.get(&user.user_id);
    if cached.is_none() {
        log::warn!("cache miss for user {} in generation {}", user.user_id, snapshot.generation);
    }
    let fallback;
    let state: &IntentionState = match cached {
        Some(s) => s,
        None => {
            fallback = IntentionState::empty(snapshot.computed_at);
            &fallback
        }
    };
    let mut ranked = Vec::with_capacity(jobs.len());
    let mut flops = 0;
    for job in jobs {
        let (pair, cost) = model.score_with_state(user, job, state)?;
        ranked.push(pair);
        flops += cost;
    }
    ranked.sort_by(|a, b| b.y_hat.total_cmp(&a.y_hat).then(a.job_id.cmp(&b.job_id)));
    Ok(OnlineScores {
        ranked,
        flops,
        cache_hit: cached.is_some(),
    })
}

fn put_matrix(out: &mut Vec<u8>, m: &Option<Tensor>) {
    match m {
        None => out.push(0),
        Some(t) => {
            out.push(1);
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
}

fn get_matrix(cur: &mut Cursor<'_>, path: &Path) -> Result<Option<Tensor>> {
    match cur.u8()? {
        0 => Ok(None),
        1 => {
            let rank = cur.len()?;
            if rank > 8 {
                return Err(Error::format(path, format!("implausible tensor rank {rank}")));
            }
            let shape = (0..rank).map(|_| cur.len()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).and_then(|n| n.checked_mul(8));
            let bytes = cur.take(n.ok_or_else(|| Error::format(path, "tensor size overflows"))?)?;
            let values = bytes.chunks_exact(8).map(|b| f64::from_bits(u64::from_le_bytes(b.try_into().unwrap()))).collect();
            Ok(Some(Tensor::new(&shape, values)?))
        }
        flag => Err(Error::format(path, format!("bad matrix flag {flag}"))),
    }
}

/// Dump layout after the envelope header: generation `u64`, computed_at
/// `u64`, user count `u64`, then per user: user_id `u32`, history_len
/// `u64`, computed_at `u64`, and `C_J`, `C_J'`, `C_Q` each as a presence
/// byte followed by rank, dims and f64 values.
pub fn encode_cache(generation: &CacheGeneration) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&generation.generation.to_le_bytes());
    out.extend_from_slice(&generation.computed_at.to_le_bytes());
    out.extend_from_slice(&(generation.states.len() as u64).to_le_bytes());
    for (user, state) in &generation.states {
        out.extend_from_slice(&user.to_le_bytes());
        out.extend_from_slice(&(state.history_len as u64).to_le_bytes());
        out.extend_from_slice(&state.computed_at.to_le_bytes());
        for m in [&state.c_j, &state.c_j_prime, &state.c_q] {
            put_matrix(&mut out, m);
        }
    }
    seal(&mut out);
    out
}

pub fn decode_cache(path: &Path, bytes: &[u8]) -> Result<CacheGeneration> {
    let body = check_envelope(path, bytes, CACHE_MAGIC, CACHE_VERSION)?;
    let mut cur = Cursor::new(body, path);
    let generation = cur.u64()?;
    let computed_at = cur.u64()?;
    let users = cur.len()?;
    let mut states = BTreeMap::new();
    for _ in 0..users {
        let user = cur.u32()?;
        let history_len = cur.len()?;
        let state_time = cur.u64()?;
        let state = IntentionState {
            c_j: get_matrix(&mut cur, path)?,
            c_j_prime: get_matrix(&mut cur, path)?,
            c_q: get_matrix(&mut cur, path)?,
            history_len,
            computed_at: state_time,
        };
        if states.insert(user, Arc::new(state)).is_some() {
            return Err(Error::format(path, format!("user {user} appears twice")));
        }
    }
    if !cur.is_done() {
        return Err(Error::format(path, "trailing bytes after the last user"));
    }
    Ok(CacheGeneration {
        generation,
        computed_at,
        states,
    })
}

pub fn save_cache(path: &Path, generation: &CacheGeneration) -> Result<()> {
    write_atomic(path, &encode_cache(generation))
}

pub fn load_cache(path: &Path) -> Result<CacheGeneration> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(path, &bytes)
}
