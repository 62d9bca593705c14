//! The full scorer: text matching, intention modeling, ID match score and
//! the prediction head, plus the ablation variants.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{self, CrossEncoder, CrossEncoderConfig, EmbeddingKind, EmbeddingTable, TokenId};
use crate::error::{bail, Error, Result};
use crate::intention::{self, AttentionParams, ClusterAxis, MhaConfig, QueryStreamValues};
use crate::nn::{self, Ctx, Mlp};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both intention streams fused with `λ`.
    #[default]
    Full,
    /// Job-ID stream only (`λ = 1`).
    NoQ,
    /// Query-text stream only (`λ = 0`).
    NoJ,
    /// Both streams, attention directly over the raw history (no clustering).
    NoC,
    /// Cross-encoder text matching alone.
    TextOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::Full, Self::NoQ, Self::NoJ, Self::NoC, Self::TextOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoQ => "no_q",
            Self::NoJ => "no_j",
            Self::NoC => "no_c",
            Self::TextOnly => "text_only",
        }
    }

    fn uses_intention(self) -> bool {
        self != Self::TextOnly
    }

    fn uses_job_stream(self) -> bool {
        matches!(self, Self::Full | Self::NoQ | Self::NoC)
    }

    fn uses_query_stream(self) -> bool {
        matches!(self, Self::Full | Self::NoJ | Self::NoC)
    }

    fn clusters(self) -> bool {
        self != Self::NoC
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of full, no_q, no_j, no_c, text_only")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Weight of the job-ID stream in the intention blend.
    pub lambda: f64,
    /// Number of intention clusters.
    pub k: usize,
    /// Attention heads of the intention readout.
    pub heads: usize,
    /// ID embedding dimension.
    pub d_j: usize,
    /// Word embedding / encoder hidden dimension.
    pub d_w: usize,
    pub dropout: f64,
    /// Most recent history entries kept per user.
    pub l_max: usize,
    pub encoder: CrossEncoderConfig,
    /// Hidden widths of the intention MLP.
    pub intention_hidden: Vec<usize>,
    /// Output width `d_o` of the intention MLP.
    pub d_o: usize,
    /// Hidden widths of the prediction MLP.
    pub prediction_hidden: Vec<usize>,
    pub variant: Variant,
    pub cluster_softmax_axis: ClusterAxis,
    pub query_stream_values: QueryStreamValues,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            k: 4,
            heads: 1,
            d_j: 16,
            d_w: 128,
            dropout: 0.2,
            l_max: 16,
            encoder: CrossEncoderConfig::default(),
            intention_hidden: vec![32],
            d_o: 32,
            prediction_hidden: vec![64],
            variant: Variant::Full,
            cluster_softmax_axis: ClusterAxis::Clusters,
            query_stream_values: QueryStreamValues::CjPrime,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        intention::check_lambda(self.lambda)?;
        if self.k == 0 {
            bail!(Config, "number of clusters k must be positive");
        }
        if self.l_max == 0 || self.d_j == 0 || self.d_w == 0 || self.d_o == 0 {
            bail!(Config, "l_max, d_j, d_w and d_o must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout {} outside [0, 1)", self.dropout);
        }
        if self.intention_hidden.contains(&0) || self.prediction_hidden.contains(&0) {
            bail!(Config, "MLP widths must be positive");
        }
        MhaConfig {
            heads: self.heads,
            model_dim: self.d_j,
        }
        .validate()?;
        self.encoder.validate(self.d_w)
    }

    /// Blend coefficient actually applied for the configured variant.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::NoQ => 1.0,
            Variant::NoJ => 0.0,
            _ => self.lambda,
        }
    }

    fn mha(&self) -> MhaConfig {
        MhaConfig {
            heads: self.heads,
            model_dim: self.d_j,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub query: Vec<TokenId>,
    pub job_id: u32,
}

/// What the model sees of a user: tokenised resume and the search history
/// (oldest first) visible at scoring time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserView {
    pub user_id: u32,
    pub resume: Vec<TokenId>,
    pub history: Vec<HistoryItem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobView {
    pub job_id: u32,
    pub description: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreComponents {
    /// L2 norm of the text match representation.
    pub o_t_norm: f64,
    /// L2 norm of the intention match representation (0 for `text_only`).
    pub o_i_norm: f64,
    pub s_match: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub user_id: u32,
    pub job_id: u32,
    pub y_hat: f64,
    pub components: ScoreComponents,
}

/// Per-user clustered intention matrices. This is all the intention
/// component needs from the search history, so it can be computed offline
/// and reused for every job scored against the user.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentionState {
    pub c_j: Option<Tensor>,
    pub c_j_prime: Option<Tensor>,
    pub c_q: Option<Tensor>,
    /// Number of history entries the state was computed from; 0 marks the
    /// sentinel state of a user without history.
    pub history_len: usize,
    pub computed_at: u64,
}

impl IntentionState {
    pub fn empty(computed_at: u64) -> Self {
        Self {
            c_j: None,
            c_j_prime: None,
            c_q: None,
            history_len: 0,
            computed_at,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.history_len == 0
    }

    pub fn is_finite(&self) -> bool {
        [&self.c_j, &self.c_j_prime, &self.c_q]
            .into_iter()
            .flatten()
            .all(Tensor::is_finite)
    }
}

/// Intention matrices recorded on a tape.
#[derive(Debug, Clone, Copy, Default)]
pub struct StateVars {
    pub c_j: Option<Var>,
    pub c_j_prime: Option<Var>,
    pub c_q: Option<Var>,
}

/// Recorded outputs of one scored pair.
#[derive(Debug, Clone)]
pub struct PairNodes {
    pub y_hat: Var,
    pub o_t: Var,
    pub o_i: Option<Var>,
    pub s_match: Option<Var>,
    /// Attention weights of the job-stream readout, one per head.
    pub job_attention: Vec<Var>,
    /// Attention weights of the query-stream readout, one per head.
    pub query_attention: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct JobStream {
    attention: AttentionParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct QueryStream {
    query_projection: ParamId,
    jd_projection: ParamId,
    clustering: Option<(ParamId, ParamId)>,
    attention: AttentionParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct IntentionParts {
    job_clustering: Option<(ParamId, ParamId)>,
    job_stream: Option<JobStream>,
    query_stream: Option<QueryStream>,
    mlp: Mlp,
    no_history: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Parts {
    words: EmbeddingTable,
    ids: Option<(EmbeddingTable, EmbeddingTable)>,
    encoder: CrossEncoder,
    intention: Option<IntentionParts>,
    head: Mlp,
}

/// Sizes of the entity spaces a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub vocab_size: usize,
    pub num_users: usize,
    pub num_jobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    dims: Dimensions,
    params: ParamStore,
    parts: Parts,
}

impl Model {
    /// Builds and randomly initialises a model.
    pub fn new(config: ModelConfig, dims: Dimensions, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;
        let (d_w, d_j, k) = (config.d_w, config.d_j, config.k);
        let variant = config.variant;

        let words = EmbeddingTable::register(&mut store, "word_embedding", EmbeddingKind::Word, dims.vocab_size, d_w, rng)?;
        let encoder = CrossEncoder::register(&mut store, "encoder", d_w, config.encoder, rng)?;
        let ids = if variant.uses_intention() {
            Some((
                EmbeddingTable::register(&mut store, "job_embedding", EmbeddingKind::JobId, dims.num_jobs, d_j, rng)?,
                EmbeddingTable::register(&mut store, "user_embedding", EmbeddingKind::UserId, dims.num_users, d_j, rng)?,
            ))
        } else {
            None
        };

        let intention = if variant.uses_intention() {
            let needs_job_clusters = variant.clusters()
                && (variant.uses_job_stream() || config.query_stream_values == QueryStreamValues::Cj);
            let job_clustering = if needs_job_clusters {
                Some((
                    store.add("job_stream.cluster.weight", nn::xavier(k, d_j, rng))?,
                    store.add("job_stream.cluster.bias", nn::zeros(k))?,
                ))
            } else {
                None
            };
            let job_stream = if variant.uses_job_stream() {
                Some(JobStream {
                    attention: AttentionParams::register(&mut store, "job_stream.attention", config.mha(), rng)?,
                })
            } else {
                None
            };
            let query_stream = if variant.uses_query_stream() {
                Some(QueryStream {
                    query_projection: store.add("query_stream.query_projection", nn::xavier(d_w, d_j, rng))?,
                    jd_projection: store.add("query_stream.jd_projection", nn::xavier(d_w, d_j, rng))?,
                    clustering: if variant.clusters() {
                        Some((
                            store.add("query_stream.cluster.weight", nn::xavier(k, 2 * d_j, rng))?,
                            store.add("query_stream.cluster.bias", nn::zeros(k))?,
                        ))
                    } else {
                        None
                    },
                    attention: AttentionParams::register(&mut store, "query_stream.attention", config.mha(), rng)?,
                })
            } else {
                None
            };
            let mut widths = vec![4 * d_j];
            widths.extend_from_slice(&config.intention_hidden);
            widths.push(config.d_o);
            let mlp = Mlp::register(&mut store, "intention_mlp", &widths, rng)?;
            let no_history = store.add("no_history_intention", nn::zeros(config.d_o).reshaped(&[1, config.d_o])?)?;
            Some(IntentionParts {
                job_clustering,
                job_stream,
                query_stream,
                mlp,
                no_history,
            })
        } else {
            None
        };

        let head_in = if variant.uses_intention() { d_w + config.d_o + 1 } else { d_w };
        let mut widths = vec![head_in];
        widths.extend_from_slice(&config.prediction_hidden);
        widths.push(1);
        let head = Mlp::register(&mut store, "prediction", &widths, rng)?;

        Ok(Self {
            config,
            dims,
            params: store,
            parts: Parts {
                words,
                ids,
                encoder,
                intention,
                head,
            },
        })
    }

    /// A model of another variant with every parameter it shares with this
    /// one (same name and shape) copied over.
    pub fn derive_variant(&self, variant: Variant, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            variant,
            ..self.config.clone()
        };
        let mut other = Self::new(config, self.dims, seed)?;
        other.params.copy_shared_from(&self.params);
        Ok(other)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes `λ` without touching parameters.
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        intention::check_lambda(lambda)?;
        self.config.lambda = lambda;
        Ok(())
    }

    pub fn dims(&self) -> Dimensions {
        self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter id of the last prediction layer's weight and bias.
    pub fn output_layer(&self) -> (ParamId, Option<ParamId>) {
        let last = self.parts.head.layers.last().expect("head has layers");
        (last.weight, last.bias)
    }

    pub fn user_embedding(&self) -> Option<ParamId> {
        self.parts.ids.map(|(_, users)| users.table)
    }

    pub fn job_embedding(&self) -> Option<ParamId> {
        self.parts.ids.map(|(jobs, _)| jobs.table)
    }

    fn check_user(&self, user: &UserView) -> Result<()> {
        if user.user_id as usize >= self.dims.num_users {
            bail!(Lookup, "unknown user {} ({} users)", user.user_id, self.dims.num_users);
        }
        if user.resume.is_empty() {
            bail!(Validation, "user {} has an empty resume", user.user_id);
        }
        Ok(())
    }

    fn check_job(&self, job: &JobView) -> Result<()> {
        if job.job_id as usize >= self.dims.num_jobs {
            bail!(Lookup, "unknown job {} ({} jobs)", job.job_id, self.dims.num_jobs);
        }
        if job.description.is_empty() {
            bail!(Validation, "job {} has an empty description", job.job_id);
        }
        Ok(())
    }

    /// The most recent `l_max` history entries.
    pub fn visible_history<'a>(&self, user: &'a UserView) -> &'a [HistoryItem] {
        let h = &user.history;
        &h[h.len().saturating_sub(self.config.l_max)..]
    }

    /// Records the user's intention matrices. `None` when the variant has no
    /// intention component or the visible history is empty.
    pub fn record_intention(&self, ctx: &mut Ctx<'_>, user: &UserView) -> Result<Option<StateVars>> {
        self.check_user(user)?;
        let (Some(parts), Some((jobs, _))) = (&self.parts.intention, &self.parts.ids) else {
            return Ok(None);
        };
        let history = self.visible_history(user);
        if history.is_empty() {
            return Ok(None);
        }
        let axis = self.config.cluster_softmax_axis;
        let job_ids: Vec<usize> = history.iter().map(|h| h.job_id as usize).collect();
        let h_j = jobs.embed_ids(ctx, &job_ids)?;
        let mut state = StateVars::default();

        if let Some((w, b)) = parts.job_clustering {
            let (w, b) = (ctx.p(w), ctx.p(b));
            state.c_j = Some(intention::cluster_job_stream(ctx, h_j, w, b, axis)?.clusters);
        } else if parts.job_stream.is_some() {
            state.c_j = Some(h_j);
        }

        if let Some(qs) = &parts.query_stream {
            let mut pooled = Vec::with_capacity(history.len());
            for item in history {
                pooled.push(encoders::pool_tokens(ctx, &self.parts.words, &item.query)?);
            }
            let pooled = ctx.tape.concat(&pooled, 0)?;
            let proj = ctx.p(qs.query_projection);
            let h_q = ctx.tape.matmul(pooled, proj)?;
            match qs.clustering {
                Some((w, b)) => {
                    let (w, b) = (ctx.p(w), ctx.p(b));
                    let joint = intention::cluster_joint(ctx, h_q, h_j, w, b, axis)?;
                    state.c_q = Some(joint.c_q);
                    state.c_j_prime = Some(joint.c_j_prime);
                }
                None => {
                    state.c_q = Some(h_q);
                    state.c_j_prime = Some(h_j);
                }
            }
        }
        Ok(Some(state))
    }

    /// Records the score of one pair given already-recorded intention
    /// matrices (`None` for users without history).
    pub fn record_pair(&self, ctx: &mut Ctx<'_>, user: &UserView, job: &JobView, state: Option<&StateVars>) -> Result<PairNodes> {
        self.check_user(user)?;
        self.check_job(job)?;
        let encoded = self.parts.encoder.encode(ctx, &self.parts.words, &user.resume, &job.description)?;
        let o_t = encoded.o_t;
        let mut nodes = PairNodes {
            y_hat: o_t,
            o_t,
            o_i: None,
            s_match: None,
            job_attention: Vec::new(),
            query_attention: Vec::new(),
        };

        let features = match (&self.parts.intention, &self.parts.ids) {
            (Some(parts), Some((jobs, users))) => {
                let h_j = jobs.embed_ids(ctx, &[job.job_id as usize])?;
                let h_u = users.embed_ids(ctx, &[user.user_id as usize])?;
                let h_u_t = ctx.tape.transpose(h_u)?;
                let s_match = ctx.tape.matmul(h_j, h_u_t)?;
                let o_i = match state {
                    Some(state) => self.record_readout(ctx, parts, state, job, h_j, &mut nodes)?,
                    None => ctx.p(parts.no_history),
                };
                nodes.o_i = Some(o_i);
                nodes.s_match = Some(s_match);
                ctx.tape.concat(&[o_t, o_i, s_match], 1)?
            }
            _ => o_t,
        };
        let features = ctx.drop(features)?;
        let logit = self.parts.head.forward(ctx, features)?;
        nodes.y_hat = ctx.tape.sigmoid(logit);
        Ok(nodes)
    }

    fn record_readout(&self, ctx: &mut Ctx<'_>, parts: &IntentionParts, state: &StateVars, job: &JobView, h_j: Var, nodes: &mut PairNodes) -> Result<Var> {
        let mha = self.config.mha();
        let missing = || Error::Contract(String::from("intention state lacks a matrix required by this variant"));
        let e_j = match &parts.job_stream {
            Some(js) => {
                let c_j = state.c_j.ok_or_else(missing)?;
                let att = intention::job_intention(ctx, h_j, c_j, &js.attention, mha)?;
                nodes.job_attention = att.weights;
                Some(att.output)
            }
            None => None,
        };
        let e_q = match &parts.query_stream {
            Some(qs) => {
                let h_tj = encoders::encode_job_desc(ctx, &self.parts.words, qs.jd_projection, &job.description)?;
                let c_q = state.c_q.ok_or_else(missing)?;
                let values = match (self.config.query_stream_values, self.config.variant.clusters()) {
                    (QueryStreamValues::Cj, true) => state.c_j.ok_or_else(missing)?,
                    _ => state.c_j_prime.ok_or_else(missing)?,
                };
                let att = intention::query_intention(ctx, h_tj, c_q, values, &qs.attention, mha)?;
                nodes.query_attention = att.weights;
                Some(att.output)
            }
            None => None,
        };
        let e = match (e_j, e_q) {
            (Some(e_j), Some(e_q)) => intention::fuse_intentions(ctx, e_j, e_q, self.config.effective_lambda())?,
            (Some(e), None) | (None, Some(e)) => e,
            (None, None) => return Err(missing()),
        };
        intention::intention_match(ctx, e, h_j, &parts.mlp)
    }

    /// Scores one pair with dropout disabled.
    pub fn score_pair(&self, user: &UserView, job: &JobView) -> Result<ScoredPair> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &self.params);
        let state = self.record_intention(&mut ctx, user)?;
        let nodes = self.record_pair(&mut ctx, user, job, state.as_ref())?;
        Ok(self.summarise(&tape, &nodes, user, job))
    }

    /// Computes the cacheable intention state of a user.
    pub fn intention_state(&self, user: &UserView, computed_at: u64) -> Result<IntentionState> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &self.params);
        let Some(vars) = self.record_intention(&mut ctx, user)? else {
            return Ok(IntentionState::empty(computed_at));
        };
        let grab = |v: Option<Var>| v.map(|v| tape.to_tensor(v));
        Ok(IntentionState {
            c_j: grab(vars.c_j),
            c_j_prime: grab(vars.c_j_prime),
            c_q: grab(vars.c_q),
            history_len: self.visible_history(user).len(),
            computed_at,
        })
    }

    /// Scores a pair against a precomputed intention state. Returns the
    /// score and the floating-point operation count of the forward pass.
    pub fn score_with_state(&self, user: &UserView, job: &JobView, state: &IntentionState) -> Result<(ScoredPair, u64)> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &self.params);
        let vars = if state.is_empty() || self.parts.intention.is_none() {
            None
        } else {
            let mut load = |t: &Option<Tensor>| -> Result<Option<Var>> {
                t.as_ref()
                    .map(|t| ctx.tape.constant(t.shape(), t.values().to_vec()))
                    .transpose()
            };
            Some(StateVars {
                c_j: load(&state.c_j)?,
                c_j_prime: load(&state.c_j_prime)?,
                c_q: load(&state.c_q)?,
            })
        };
        let nodes = self.record_pair(&mut ctx, user, job, vars.as_ref())?;
        let flops = tape.flops();
        Ok((self.summarise(&tape, &nodes, user, job), flops))
    }

    fn summarise(&self, tape: &Tape, nodes: &PairNodes, user: &UserView, job: &JobView) -> ScoredPair {
        let norm = |v: Var| crate::math::sqrt(tape.value(v).iter().map(|x| x * x).sum());
        ScoredPair {
            user_id: user.user_id,
            job_id: job.job_id,
            y_hat: tape.scalar(nodes.y_hat),
            components: ScoreComponents {
                o_t_norm: norm(nodes.o_t),
                o_i_norm: nodes.o_i.map_or(0.0, norm),
                s_match: nodes.s_match.map_or(0.0, |v| tape.scalar(v)),
            },
        }
    }

    /// Summed BCE over `pairs`. The intention state of each distinct user view
    /// is recorded once and shared by all of its pairs.
    pub fn batch_loss(&self, ctx: &mut Ctx<'_>, pairs: &[(&UserView, &JobView, u8)]) -> Result<Var> {
        if pairs.is_empty() {
            bail!(Validation, "empty batch");
        }
        // Keyed by view address: the same view always yields the same state.
        let mut states: BTreeMap<usize, Option<StateVars>> = BTreeMap::new();
        let mut probs = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for (user, job, label) in pairs {
            let key = core::ptr::from_ref::<UserView>(user) as usize;
            let state = match states.get(&key) {
                Some(s) => *s,
                None => {
                    let s = self.record_intention(ctx, user)?;
                    states.insert(key, s);
                    s
                }
            };
            let nodes = self.record_pair(ctx, user, job, state.as_ref())?;
            probs.push(nodes.y_hat);
            labels.push(f64::from(*label));
        }
        let probs = if probs.len() == 1 { probs[0] } else { ctx.tape.concat(&probs, 0)? };
        ctx.tape.bce_loss(probs, &labels)
    }
}
