//! The micro configuration used for full-model gradient checks: vocabulary
//! 20, history length 3, k = 2, d_j = 4, d_w = 8, one encoder layer.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::CrossEncoderConfig;
use crate::error::Result;
use crate::model::{Dimensions, HistoryItem, JobView, Model, ModelConfig, UserView};
use crate::nn::Ctx;
use crate::tensor::{grad_check, GradCheckReport};

pub const MICRO_HISTORY: usize = 3;

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

fn tokens(rng: &mut ChaCha8Rng, dims: Dimensions, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(4..dims.vocab_size as u32)).collect()
}

fn user(rng: &mut ChaCha8Rng, dims: Dimensions, user_id: u32) -> UserView {
    let resume_len = rng.random_range(1..5);
    UserView {
        user_id,
        resume: tokens(rng, dims, resume_len),
        history: (0..MICRO_HISTORY)
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

fn job(rng: &mut ChaCha8Rng, dims: Dimensions, job_id: u32) -> JobView {
    let len = rng.random_range(1..6);
    JobView {
        job_id,
        description: tokens(rng, dims, len),
    }
}

/// Model, two users and three jobs drawn from `seed`.
pub fn micro_fixture(seed: u64) -> Result<(Model, [UserView; 2], Vec<JobView>)> {
    let dims = micro_dims();
    let model = Model::new(micro_config(), dims, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = [user(&mut rng, dims, 0), user(&mut rng, dims, 1)];
    let jobs = (0..3).map(|j| job(&mut rng, dims, j)).collect();
    Ok((model, users, jobs))
}

/// Compares the gradient of the summed BCE over four labelled pairs with
/// central differences of step `step`, over every parameter.
pub fn micro_grad_check(seed: u64, step: f64) -> Result<GradCheckReport> {
    let (mut model, users, jobs) = micro_fixture(seed)?;
    let pairs = [(&users[0], &jobs[0], 1u8), (&users[0], &jobs[1], 0), (&users[1], &jobs[2], 1), (&users[1], &jobs[0], 0)];
    let frozen = model.clone();
    let ids: Vec<_> = model.params().ids().collect();
    grad_check(model.params_mut(), &ids, step, |store, tape| {
        let mut ctx = Ctx::new(tape, store);
        frozen.batch_loss(&mut ctx, &pairs)
    })
}
