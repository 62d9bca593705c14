//! Intention clustering over a user's search history and job-specific
//! readout by multi-head attention.
//!
//! Two streams are modeled. The job stream softly assigns the embeddings of
//! applied jobs `H_J [L×d]` to `k` clusters, `P_J = softmax(W1·H_Jᵀ + b1)`,
//! `C_J = P_J·H_J`, and reads them out with the candidate job embedding as
//! the attention query. The query stream computes one assignment `P_Q` from
//! the concatenation `[H_Q; H_J]` and applies it to both sides, giving
//! `C_Q = P_Q·H_Q` (keys) and `C_J' = P_Q·H_J` (values); the candidate job's
//! description representation is the attention query. The two readouts are
//! blended with a fixed coefficient and matched against the job embedding.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{self, Ctx, Mlp};
use crate::tensor::{ParamId, ParamStore, Var};

/// Which axis of the `k×L` assignment logits is normalised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterAxis {
    /// Each history entry (column) is a distribution over the `k` clusters.
    #[default]
    Clusters,
    /// Each cluster (row) is a distribution over history positions.
    History,
}

impl ClusterAxis {
    fn softmax_axis(self) -> usize {
        match self {
            Self::Clusters => 0,
            Self::History => 1,
        }
    }
}

/// Attention values used by the query stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStreamValues {
    /// `C_J'`: job embeddings clustered with the query-stream assignment.
    #[default]
    CjPrime,
    /// `C_J`: the job-stream clusters.
    Cj,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhaConfig {
    pub heads: usize,
    pub model_dim: usize,
}

impl MhaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            bail!(
                Config,
                "model dim {} must be a positive multiple of heads {}",
                self.model_dim,
                self.heads
            );
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Clustering {
    /// Assignment probabilities, `[k × L]`.
    pub assign: Var,
    /// Cluster representations, `[k × d]`.
    pub clusters: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct JointClustering {
    pub assign: Var,
    pub c_q: Var,
    pub c_j_prime: Var,
}

/// Assignment logits `W·Xᵀ + b` as `[k × L]`, normalised along `axis`.
fn assignment(ctx: &mut Ctx<'_>, x: Var, w: Var, b: Var, axis: ClusterAxis) -> Result<Var> {
    let k = ctx.tape.shape(w)[0];
    if k == 0 {
        bail!(Config, "number of clusters must be positive");
    }
    let wt = ctx.tape.transpose(w)?;
    let logits = ctx.tape.matmul(x, wt)?;
    let logits = ctx.tape.add_bias(logits, b)?;
    let logits = ctx.tape.transpose(logits)?;
    ctx.tape.softmax(logits, axis.softmax_axis())
}

/// Job-stream clustering: `P_J = softmax(W1·H_Jᵀ + b1)`, `C_J = P_J·H_J`.
///
/// `h_j` is `[L×d]`, `w1` is `[k×d]` and `b1` is `[k]`.
pub fn cluster_job_stream(ctx: &mut Ctx<'_>, h_j: Var, w1: Var, b1: Var, axis: ClusterAxis) -> Result<Clustering> {
    let assign = assignment(ctx, h_j, w1, b1, axis)?;
    let clusters = ctx.tape.matmul(assign, h_j)?;
    Ok(Clustering { assign, clusters })
}

/// Joint clustering of the query and job streams under one assignment
/// `P_Q = softmax(W2·[H_Q;H_J]ᵀ + b2)` with `w2: [k×2d]`.
pub fn cluster_joint(ctx: &mut Ctx<'_>, h_q: Var, h_j: Var, w2: Var, b2: Var, axis: ClusterAxis) -> Result<JointClustering> {
    if ctx.tape.shape(h_q)[0] != ctx.tape.shape(h_j)[0] {
        bail!(
            Validation,
            "query sequence has {} entries but job sequence has {}",
            ctx.tape.shape(h_q)[0],
            ctx.tape.shape(h_j)[0]
        );
    }
    let joint = ctx.tape.concat(&[h_q, h_j], 1)?;
    let assign = assignment(ctx, joint, w2, b2, axis)?;
    let c_q = ctx.tape.matmul(assign, h_q)?;
    let c_j_prime = ctx.tape.matmul(assign, h_j)?;
    Ok(JointClustering { assign, c_q, c_j_prime })
}

/// Projection matrices of one multi-head attention block. Per-head
/// matrices `W_i^Q, W_i^K, W_i^V` are stored side by side as column blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl AttentionParams {
    pub fn register(store: &mut ParamStore, name: &str, cfg: MhaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let inner = cfg.heads * cfg.head_dim();
        Ok(Self {
            w_q: store.add(&format!("{name}.w_q"), nn::xavier(d, inner, rng))?,
            w_k: store.add(&format!("{name}.w_k"), nn::xavier(d, inner, rng))?,
            w_v: store.add(&format!("{name}.w_v"), nn::xavier(d, inner, rng))?,
            w_o: store.add(&format!("{name}.w_o"), nn::xavier(inner, d, rng))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Attended {
    /// `[1 × d]`.
    pub output: Var,
    /// Attention weights over the keys, one `[1 × k]` row per head.
    pub weights: Vec<Var>,
}

/// `[head_1, …, head_h]·W^O` with
/// `head_i = softmax(q·W_i^Q (K·W_i^K)ᵀ / √D)·V·W_i^V`.
pub fn multi_head_attend(ctx: &mut Ctx<'_>, query: Var, keys: Var, values: Var, params: &AttentionParams, cfg: MhaConfig) -> Result<Attended> {
    cfg.validate()?;
    if ctx.tape.shape(keys)[0] != ctx.tape.shape(values)[0] {
        bail!(
            Dimension,
            "attention keys {:?} and values {:?} have different row counts",
            ctx.tape.shape(keys),
            ctx.tape.shape(values)
        );
    }
    let d = cfg.head_dim();
    let scale = 1.0 / crate::math::sqrt(d as f64);
    let (w_q, w_k, w_v, w_o) = (ctx.p(params.w_q), ctx.p(params.w_k), ctx.p(params.w_v), ctx.p(params.w_o));
    let q = ctx.tape.matmul(query, w_q)?;
    let k = ctx.tape.matmul(keys, w_k)?;
    let v = ctx.tape.matmul(values, w_v)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                ctx.tape.slice_cols(q, h * d, d)?,
                ctx.tape.slice_cols(k, h * d, d)?,
                ctx.tape.slice_cols(v, h * d, d)?,
            )
        };
        let kt = ctx.tape.transpose(kh)?;
        let scores = ctx.tape.matmul(qh, kt)?;
        let scores = ctx.tape.scale(scores, scale);
        let w = ctx.tape.softmax(scores, 1)?;
        weights.push(w);
        heads.push(ctx.tape.matmul(w, vh)?);
    }
    let merged = if cfg.heads == 1 { heads[0] } else { ctx.tape.concat(&heads, 1)? };
    let output = ctx.tape.matmul(merged, w_o)?;
    Ok(Attended { output, weights })
}

/// Job-ID-stream readout: the candidate job embedding attends over `C_J`.
pub fn job_intention(ctx: &mut Ctx<'_>, h_j: Var, c_j: Var, params: &AttentionParams, cfg: MhaConfig) -> Result<Attended> {
    multi_head_attend(ctx, h_j, c_j, c_j, params, cfg)
}

/// Query-stream readout: the job description representation attends over
/// the clustered queries, reading out clustered job embeddings.
pub fn query_intention(ctx: &mut Ctx<'_>, h_tj: Var, c_q: Var, values: Var, params: &AttentionParams, cfg: MhaConfig) -> Result<Attended> {
    multi_head_attend(ctx, h_tj, c_q, values, params, cfg)
}

/// `λ·e_J + (1−λ)·e_Q`.
pub fn fuse_intentions(ctx: &mut Ctx<'_>, e_j: Var, e_q: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = ctx.tape.scale(e_j, lambda);
    let b = ctx.tape.scale(e_q, 1.0 - lambda);
    ctx.tape.add(a, b)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        bail!(Config, "combination coefficient {} outside [0, 1]", lambda);
    }
    Ok(())
}

/// `[ẽ; h_j; ẽ−h_j; ẽ∘h_j]` as a `[1 × 4d]` row.
pub fn intention_features(ctx: &mut Ctx<'_>, e: Var, h_j: Var) -> Result<Var> {
    let diff = ctx.tape.sub(e, h_j)?;
    let prod = ctx.tape.mul(e, h_j)?;
    ctx.tape.concat(&[e, h_j, diff, prod], 1)
}

/// Match representation `o_I = MLP([ẽ; h_j; ẽ−h_j; ẽ∘h_j])`.
pub fn intention_match(ctx: &mut Ctx<'_>, e: Var, h_j: Var, mlp: &Mlp) -> Result<Var> {
    let width = ctx.tape.shape(e)[ctx.tape.shape(e).len() - 1];
    if let Some(first) = mlp.layers.first() {
        let expected = ctx.store.get(first.weight).shape()[0];
        if expected != 4 * width {
            bail!(Config, "intention MLP expects width {} but features have width {}", expected, 4 * width);
        }
    }
    let features = intention_features(ctx, e, h_j)?;
    mlp.forward(ctx, features)
}
