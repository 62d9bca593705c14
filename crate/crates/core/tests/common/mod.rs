//! Plain nested-Vec reference implementations used as test oracles. They
//! read parameters by name and share no code with the library's math.

#![allow(dead_code)]

use pjfit_core::encoders::{CLS, PAD, SEP};
use pjfit_core::intention::{ClusterAxis, QueryStreamValues};
use pjfit_core::model::{JobView, Model, UserView, Variant};
use pjfit_core::tensor::ParamStore;

pub type Mat = Vec<Vec<f64>>;

pub fn param(store: &ParamStore, name: &str) -> Mat {
    let id = store.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    let t = store.get(id);
    let cols = *t.shape().last().unwrap();
    t.values().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn vecp(store: &ParamStore, name: &str) -> Vec<f64> {
    param(store, name).concat()
}

pub fn has(store: &ParamStore, name: &str) -> bool {
    store.id(name).is_some()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a[0].len(), b.len());
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| {
                    let mut s = 0.0;
                    for (k, x) in row.iter().enumerate() {
                        s += x * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn tr(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter().map(|r| softmax_vec(r)).collect()
}

pub fn softmax_cols(a: &Mat) -> Mat {
    tr(&softmax_rows(&tr(a)))
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub fn layer_norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(i, v)| g[i] * (v - mean) / sd + b[i]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| f(*v)).collect()).collect()
}

pub fn linear(x: &Mat, store: &ParamStore, name: &str) -> Mat {
    let y = mm(x, &param(store, &format!("{name}.weight")));
    if has(store, &format!("{name}.bias")) {
        add_row(&y, &vecp(store, &format!("{name}.bias")))
    } else {
        y
    }
}

pub fn mlp(x: &[f64], store: &ParamStore, name: &str) -> Vec<f64> {
    let mut h = vec![x.to_vec()];
    let mut i = 0;
    while has(store, &format!("{name}.{i}.weight")) {
        if i > 0 {
            h = map(&h, |v| v.max(0.0));
        }
        h = linear(&h, store, &format!("{name}.{i}"));
        i += 1;
    }
    h.remove(0)
}

pub fn rows(table: &Mat, ids: &[usize]) -> Mat {
    ids.iter().map(|i| table[*i].clone()).collect()
}

pub fn mean_rows(a: &Mat) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

pub fn pooled(store: &ParamStore, tokens: &[u32]) -> Vec<f64> {
    let table = param(store, "word_embedding");
    let ids: Vec<usize> = tokens.iter().filter(|t| **t != PAD).map(|t| *t as usize).collect();
    mean_rows(&rows(&table, &ids))
}

/// Reference cross-encoder for inputs short enough to need no truncation.
pub fn encoder(store: &ParamStore, heads: usize, resume: &[u32], jd: &[u32]) -> (Vec<f64>, Vec<Mat>) {
    let mut tokens = vec![CLS];
    tokens.extend_from_slice(resume);
    tokens.push(SEP);
    let first_jd = tokens.len();
    tokens.extend_from_slice(jd);
    let words = param(store, "word_embedding");
    let pos = param(store, "encoder.positions");
    let seg = param(store, "encoder.segments");
    assert!(tokens.len() <= pos.len(), "oracle does not truncate");
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let s = &seg[usize::from(i >= first_jd)];
            (0..words[0].len()).map(|c| words[*t as usize][c] + pos[i][c] + s[c]).collect()
        })
        .collect();
    let d = x[0].len();
    let hd = d / heads;
    let mut weights = Vec::new();
    let mut l = 0;
    while has(store, &format!("encoder.layer{l}.ln1.gamma")) {
        let p = format!("encoder.layer{l}");
        let a = layer_norm(&x, &vecp(store, &format!("{p}.ln1.gamma")), &vecp(store, &format!("{p}.ln1.beta")));
        let q = linear(&a, store, &format!("{p}.query"));
        let k = linear(&a, store, &format!("{p}.key"));
        let v = linear(&a, store, &format!("{p}.value"));
        let mut merged = vec![vec![0.0; d]; x.len()];
        for h in 0..heads {
            let cols = |m: &Mat| -> Mat { m.iter().map(|r| r[h * hd..(h + 1) * hd].to_vec()).collect() };
            let (qh, kh, vh) = (cols(&q), cols(&k), cols(&v));
            let scores = map(&mm(&qh, &tr(&kh)), |s| s / (hd as f64).sqrt());
            let w = softmax_rows(&scores);
            let o = mm(&w, &vh);
            for (r, row) in o.iter().enumerate() {
                merged[r][h * hd..(h + 1) * hd].copy_from_slice(row);
            }
            weights.push(w);
        }
        x = add(&x, &linear(&merged, store, &format!("{p}.out")));
        let f = layer_norm(&x, &vecp(store, &format!("{p}.ln2.gamma")), &vecp(store, &format!("{p}.ln2.beta")));
        let f = map(&linear(&f, store, &format!("{p}.ff1")), gelu);
        x = add(&x, &linear(&f, store, &format!("{p}.ff2")));
        l += 1;
    }
    let x = layer_norm(&x, &vecp(store, "encoder.final_ln.gamma"), &vecp(store, "encoder.final_ln.beta"));
    (x[0].clone(), weights)
}

/// Multi-head attention with head blocks stored as column slices.
pub fn attend(query: &[f64], keys: &Mat, values: &Mat, store: &ParamStore, name: &str, heads: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let q = mm(&vec![query.to_vec()], &param(store, &format!("{name}.w_q")));
    let k = mm(keys, &param(store, &format!("{name}.w_k")));
    let v = mm(values, &param(store, &format!("{name}.w_v")));
    let hd = q[0].len() / heads;
    let mut merged = Vec::new();
    let mut all = Vec::new();
    for h in 0..heads {
        let r = h * hd..(h + 1) * hd;
        let scores: Vec<f64> = k
            .iter()
            .map(|kr| q[0][r.clone()].iter().zip(&kr[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
            .collect();
        let w = softmax_vec(&scores);
        for c in r.clone() {
            merged.push(w.iter().zip(&v).map(|(wi, vr)| wi * vr[c]).sum::<f64>());
        }
        all.push(w);
    }
    (mm(&vec![merged], &param(store, &format!("{name}.w_o"))).remove(0), all)
}

pub fn cluster(x: &Mat, w: &Mat, b: &[f64], axis: ClusterAxis) -> Mat {
    // logits[c][i] = w_c · x_i + b_c
    let logits: Mat = w
        .iter()
        .zip(b)
        .map(|(wc, bc)| x.iter().map(|xi| wc.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + bc).collect())
        .collect();
    match axis {
        ClusterAxis::Clusters => softmax_cols(&logits),
        ClusterAxis::History => softmax_rows(&logits),
    }
}

pub struct Staged {
    pub y_hat: f64,
    pub o_t: Vec<f64>,
    pub o_i: Option<Vec<f64>>,
    pub s_match: Option<f64>,
}

/// Step-by-step reference score of one pair.
pub fn score(model: &Model, user: &UserView, job: &JobView) -> Staged {
    let cfg = model.config();
    let s = model.params();
    let (o_t, _) = encoder(s, cfg.encoder.heads, &user.resume, &job.description);
    if cfg.variant == Variant::TextOnly {
        let logit = mlp(&o_t, s, "prediction");
        return Staged {
            y_hat: 1.0 / (1.0 + (-logit[0]).exp()),
            o_t,
            o_i: None,
            s_match: None,
        };
    }
    let jobs = param(s, "job_embedding");
    let users = param(s, "user_embedding");
    let h_j = jobs[job.job_id as usize].clone();
    let h_u = &users[user.user_id as usize];
    let s_match: f64 = h_j.iter().zip(h_u).map(|(a, b)| a * b).sum();
    let history = &user.history[user.history.len().saturating_sub(cfg.l_max)..];
    let o_i = if history.is_empty() {
        vecp(s, "no_history_intention")
    } else {
        let hj_seq = rows(&jobs, &history.iter().map(|h| h.job_id as usize).collect::<Vec<_>>());
        let clusters = cfg.variant != Variant::NoC;
        let job_clusters = || {
            let p = cluster(&hj_seq, &param(s, "job_stream.cluster.weight"), &vecp(s, "job_stream.cluster.bias"), cfg.cluster_softmax_axis);
            mm(&p, &hj_seq)
        };
        let e_j = matches!(cfg.variant, Variant::Full | Variant::NoQ | Variant::NoC).then(|| {
            let c_j = if clusters { job_clusters() } else { hj_seq.clone() };
            attend(&h_j, &c_j, &c_j, s, "job_stream.attention", cfg.heads).0
        });
        let e_q = matches!(cfg.variant, Variant::Full | Variant::NoJ | Variant::NoC).then(|| {
            let pooled_q: Mat = history.iter().map(|h| pooled(s, &h.query)).collect();
            let hq = mm(&pooled_q, &param(s, "query_stream.query_projection"));
            let (c_q, values) = if clusters {
                let joint: Mat = hq.iter().zip(&hj_seq).map(|(a, b)| [a.as_slice(), b.as_slice()].concat()).collect();
                let p = cluster(&joint, &param(s, "query_stream.cluster.weight"), &vecp(s, "query_stream.cluster.bias"), cfg.cluster_softmax_axis);
                let values = match cfg.query_stream_values {
                    QueryStreamValues::CjPrime => mm(&p, &hj_seq),
                    QueryStreamValues::Cj => job_clusters(),
                };
                (mm(&p, &hq), values)
            } else {
                (hq, hj_seq.clone())
            };
            let h_tj = mm(&vec![pooled(s, &job.description)], &param(s, "query_stream.jd_projection")).remove(0);
            attend(&h_tj, &c_q, &values, s, "query_stream.attention", cfg.heads).0
        });
        let lambda = match cfg.variant {
            Variant::NoQ => 1.0,
            Variant::NoJ => 0.0,
            _ => cfg.lambda,
        };
        let e: Vec<f64> = match (e_j, e_q) {
            (Some(a), Some(b)) => a.iter().zip(&b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect(),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!(),
        };
        let mut features = e.clone();
        features.extend_from_slice(&h_j);
        features.extend(e.iter().zip(&h_j).map(|(a, b)| a - b));
        features.extend(e.iter().zip(&h_j).map(|(a, b)| a * b));
        mlp(&features, s, "intention_mlp")
    };
    let mut x = o_t.clone();
    x.extend_from_slice(&o_i);
    x.push(s_match);
    let logit = mlp(&x, s, "prediction");
    Staged {
        y_hat: 1.0 / (1.0 + (-logit[0]).exp()),
        o_t,
        o_i: Some(o_i),
        s_match: Some(s_match),
    }
}

pub mod fixtures {
    use pjfit_core::encoders::CrossEncoderConfig;
    use pjfit_core::model::{Dimensions, HistoryItem, JobView, ModelConfig, UserView};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// V=20, k=2, d_j=4, d_w=8, one encoder layer.
    pub fn micro_config() -> ModelConfig {
        ModelConfig {
            k: 2,
            d_j: 4,
            d_w: 8,
            dropout: 0.0,
            l_max: 16,
            encoder: CrossEncoderConfig {
                layers: 1,
                heads: 2,
                ff_width: 16,
                max_tokens: 16,
            },
            intention_hidden: vec![8],
            d_o: 6,
            prediction_hidden: vec![8],
            ..Default::default()
        }
    }

    pub fn micro_dims() -> Dimensions {
        Dimensions {
            vocab_size: 20,
            num_users: 2,
            num_jobs: 6,
        }
    }

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn tokens(rng: &mut ChaCha8Rng, dims: Dimensions, n: usize) -> Vec<u32> {
        (0..n).map(|_| rng.random_range(4..dims.vocab_size as u32)).collect()
    }

    pub fn user(rng: &mut ChaCha8Rng, dims: Dimensions, user_id: u32, history: usize) -> UserView {
        let resume_len = rng.random_range(1..5);
        UserView {
            user_id,
            resume: tokens(rng, dims, resume_len),
            history: (0..history)
                .map(|_| {
                    let q = rng.random_range(1..4);
                    HistoryItem {
                        query: tokens(rng, dims, q),
                        job_id: rng.random_range(0..dims.num_jobs as u32),
                    }
                })
                .collect(),
        }
    }

    pub fn job(rng: &mut ChaCha8Rng, dims: Dimensions, job_id: u32) -> JobView {
        let len = rng.random_range(1..6);
        JobView {
            job_id,
            description: tokens(rng, dims, len),
        }
    }
}
