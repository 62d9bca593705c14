//! Vocabulary, embedding tables and the text encoders.
//!
//! The cross-encoder reads `[CLS] resume [SEP] job-description` jointly so
//! that self-attention mixes tokens across the pair, and returns the final
//! hidden state of the `[CLS]` position. Query texts and job descriptions
//! are also represented by mean-pooled word embeddings.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::nn::{self, Ctx, Linear};
use crate::tensor::{ParamId, ParamStore, Var};

pub type TokenId = u32;

pub const CLS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const PAD: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];

/// Token strings to contiguous ids; ids 0..4 are the reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Self { tokens, index }
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose `i`-th ordinary token gets id `i + 4`.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::default();
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                bail!(Validation, "token {t:?} is empty or contains whitespace");
            }
            if vocab.index.contains_key(&t) {
                bail!(Validation, "duplicate token {t:?}");
            }
            vocab.index.insert(t.clone(), vocab.tokens.len() as TokenId);
            vocab.tokens.push(t);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Ordinary (non-reserved) tokens in id order.
    pub fn ordinary_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens[RESERVED.len()..].iter().map(String::as_str)
    }

    /// Whitespace tokenisation; unknown tokens map to `UNK`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Word,
    JobId,
    UserId,
}

impl EmbeddingKind {
    fn label(self) -> &'static str {
        match self {
            Self::Word => "word",
            Self::JobId => "job",
            Self::UserId => "user",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub kind: EmbeddingKind,
    pub rows: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn register(store: &mut ParamStore, name: &str, kind: EmbeddingKind, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if rows == 0 || dim == 0 {
            bail!(Config, "embedding table {name} needs positive size, got {rows}x{dim}");
        }
        let table = store.add(name, nn::normal(rows, dim, 0.1, rng))?;
        Ok(Self { table, kind, rows, dim })
    }

    /// Looks up rows `ids`, shape `[ids.len() × dim]`.
    pub fn embed_ids(&self, ctx: &mut Ctx<'_>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.rows) {
            return Err(Error::OutOfRange {
                kind: self.kind.label(),
                id: bad,
                size: self.rows,
            });
        }
        ctx.tape.gather(ctx.store, self.table, ids)
    }
}

/// Mean of the non-`PAD` token embeddings, shape `[1 × d_w]`.
pub fn pool_tokens(ctx: &mut Ctx<'_>, words: &EmbeddingTable, tokens: &[TokenId]) -> Result<Var> {
    let ids: Vec<usize> = tokens.iter().filter(|&&t| t != PAD).map(|&t| t as usize).collect();
    if ids.is_empty() {
        bail!(Validation, "cannot pool an empty token sequence");
    }
    let rows = words.embed_ids(ctx, &ids)?;
    ctx.tape.mean_rows(rows)
}

/// Job-description representation in the ID space: mean-pooled word
/// embeddings through a bias-free `d_w → d_j` projection.
pub fn encode_job_desc(ctx: &mut Ctx<'_>, words: &EmbeddingTable, projection: ParamId, tokens: &[TokenId]) -> Result<Var> {
    let pooled = pool_tokens(ctx, words, tokens)?;
    let w = ctx.p(projection);
    ctx.tape.matmul(pooled, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Truncation length `m` of the joint sequence, specials included.
    pub max_tokens: usize,
}

impl Default for CrossEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            ff_width: 256,
            max_tokens: 64,
        }
    }
}

impl CrossEncoderConfig {
    pub fn validate(&self, d_w: usize) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.ff_width == 0 {
            bail!(Config, "encoder layers, heads and ff_width must be positive");
        }
        if d_w % self.heads != 0 {
            bail!(Config, "word dimension {d_w} not divisible by {} encoder heads", self.heads);
        }
        if self.max_tokens < 4 {
            bail!(Config, "max_tokens {} leaves no room for both segments", self.max_tokens);
        }
        Ok(())
    }
}

/// Joint truncation to `max_tokens`: `[CLS]` and `[SEP]` are always kept and
/// the remaining budget is split in proportion to the segment lengths, with
/// at least one token per segment. Returns token ids and segment ids.
pub fn truncate_pair(resume: &[TokenId], jd: &[TokenId], max_tokens: usize) -> Result<(Vec<TokenId>, Vec<usize>)> {
    if resume.is_empty() || jd.is_empty() {
        bail!(Validation, "resume and job description must both be non-empty");
    }
    if max_tokens < 4 {
        bail!(Config, "max_tokens {max_tokens} leaves no room for both segments");
    }
    let budget = max_tokens - 2;
    let (r, t) = (resume.len(), jd.len());
    let (keep_r, keep_t) = if r + t <= budget {
        (r, t)
    } else {
        let proportional = (budget * r / (r + t)).clamp(1, r);
        let keep_t = t.min(budget - proportional);
        // Budget the description cannot use goes back to the resume.
        (r.min(budget - keep_t), keep_t)
    };
    let mut tokens = Vec::with_capacity(keep_r + keep_t + 2);
    tokens.push(CLS);
    tokens.extend_from_slice(&resume[..keep_r]);
    tokens.push(SEP);
    tokens.extend_from_slice(&jd[..keep_t]);
    let mut segments = vec![0; keep_r + 2];
    segments.resize(tokens.len(), 1);
    Ok((tokens, segments))
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct EncoderLayer {
    ln1: (ParamId, ParamId),
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln2: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm transformer cross-encoder over `[CLS] resume [SEP] jd`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossEncoder {
    pub config: CrossEncoderConfig,
    pub d_w: usize,
    positions: ParamId,
    segments: ParamId,
    layers: Vec<EncoderLayer>,
    final_ln: (ParamId, ParamId),
}

/// Output of [`CrossEncoder::encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final `[CLS]` hidden state, shape `[1 × d_w]`.
    pub o_t: Var,
    /// Attention weight matrices `[n × n]`, layer-major then head.
    pub attention: Vec<Var>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl CrossEncoder {
    pub fn register(store: &mut ParamStore, name: &str, d_w: usize, config: CrossEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate(d_w)?;
        let positions = store.add(&format!("{name}.positions"), nn::normal(config.max_tokens, d_w, 0.1, rng))?;
        let segments = store.add(&format!("{name}.segments"), nn::normal(2, d_w, 0.1, rng))?;
        let ln = |store: &mut ParamStore, n: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(&format!("{n}.gamma"), nn::ones(d_w))?,
                store.add(&format!("{n}.beta"), nn::zeros(d_w))?,
            ))
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("{name}.layer{l}");
            layers.push(EncoderLayer {
                ln1: ln(store, &format!("{p}.ln1"))?,
                query: Linear::register(store, &format!("{p}.query"), d_w, d_w, true, rng)?,
                key: Linear::register(store, &format!("{p}.key"), d_w, d_w, true, rng)?,
                value: Linear::register(store, &format!("{p}.value"), d_w, d_w, true, rng)?,
                out: Linear::register(store, &format!("{p}.out"), d_w, d_w, true, rng)?,
                ln2: ln(store, &format!("{p}.ln2"))?,
                ff1: Linear::register(store, &format!("{p}.ff1"), d_w, config.ff_width, true, rng)?,
                ff2: Linear::register(store, &format!("{p}.ff2"), config.ff_width, d_w, true, rng)?,
            });
        }
        let final_ln = ln(store, &format!("{name}.final_ln"))?;
        Ok(Self {
            config,
            d_w,
            positions,
            segments,
            layers,
            final_ln,
        })
    }

    pub fn encode(&self, ctx: &mut Ctx<'_>, words: &EmbeddingTable, resume: &[TokenId], jd: &[TokenId]) -> Result<Encoded> {
        let (tokens, segs) = truncate_pair(resume, jd, self.config.max_tokens)?;
        let n = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = words.embed_ids(ctx, &ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = ctx.tape.gather(ctx.store, self.positions, &positions)?;
        let seg = ctx.tape.gather(ctx.store, self.segments, &segs)?;
        let mut x = ctx.tape.add(tok, pos)?;
        x = ctx.tape.add(x, seg)?;
        x = ctx.drop(x)?;

        let heads = self.config.heads;
        let head_dim = self.d_w / heads;
        let scale = 1.0 / crate::math::sqrt(head_dim as f64);
        let mut attention = Vec::with_capacity(self.layers.len() * heads);
        for layer in &self.layers {
            let (g, b) = (ctx.p(layer.ln1.0), ctx.p(layer.ln1.1));
            let a = ctx.tape.layer_norm(x, g, b, LAYER_NORM_EPS)?;
            let q = layer.query.forward(ctx, a)?;
            let k = layer.key.forward(ctx, a)?;
            let v = layer.value.forward(ctx, a)?;
            let mut head_out = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = ctx.tape.slice_cols(q, h * head_dim, head_dim)?;
                let kh = ctx.tape.slice_cols(k, h * head_dim, head_dim)?;
                let vh = ctx.tape.slice_cols(v, h * head_dim, head_dim)?;
                let kt = ctx.tape.transpose(kh)?;
                let scores = ctx.tape.matmul(qh, kt)?;
                let scores = ctx.tape.scale(scores, scale);
                let weights = ctx.tape.softmax(scores, 1)?;
                attention.push(weights);
                head_out.push(ctx.tape.matmul(weights, vh)?);
            }
            let merged = if heads == 1 { head_out[0] } else { ctx.tape.concat(&head_out, 1)? };
            let attn = layer.out.forward(ctx, merged)?;
            let attn = ctx.drop(attn)?;
            x = ctx.tape.add(x, attn)?;

            let (g, b) = (ctx.p(layer.ln2.0), ctx.p(layer.ln2.1));
            let f = ctx.tape.layer_norm(x, g, b, LAYER_NORM_EPS)?;
            let f = layer.ff1.forward(ctx, f)?;
            let f = ctx.tape.gelu(f);
            let f = layer.ff2.forward(ctx, f)?;
            let f = ctx.drop(f)?;
            x = ctx.tape.add(x, f)?;
        }
        let (g, b) = (ctx.p(self.final_ln.0), ctx.p(self.final_ln.1));
        let x = ctx.tape.layer_norm(x, g, b, LAYER_NORM_EPS)?;
        let o_t = ctx.tape.select_rows(x, &[0])?;
        Ok(Encoded { o_t, attention })
    }
}
