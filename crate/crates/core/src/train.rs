//! Mini-batch Adam training with early stopping on validation GAUC, and
//! model evaluation over impression groups.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, ImpressionGroup};
use crate::error::{bail, Error, Result};
use crate::metrics::{self, EvalReport, GaucWeighting, ScoredGroup, ScoredItem};
use crate::model::Model;
use crate::nn::Ctx;
use crate::tensor::{adam_step, AdamState, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Adam step size; the usual grid is 0.01, 0.001 and 0.00001.
    pub learning_rate: f64,
    /// Impression groups per mini-batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub gauc_weighting: GaucWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            gauc_weighting: GaucWeighting::Unweighted,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.learning_rate);
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            bail!(Config, "batch_size and max_epochs must be positive");
        }
        if self.patience == 0 {
            bail!(Config, "patience must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean BCE per training pair.
    pub train_loss: f64,
    pub val_gauc: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_gauc: f64,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.log.len()
    }
}

/// Scores every item of every group with dropout off. Each user's
/// intention matrices are recorded once per group.
pub fn score_groups(model: &Model, corpus: &Corpus, groups: &[ImpressionGroup]) -> Result<Vec<ScoredGroup>> {
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let user = corpus.user(g.user_id)?;
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, model.params());
        let state = model.record_intention(&mut ctx, user)?;
        let mut items = Vec::with_capacity(g.items.len());
        for (job_id, label) in &g.items {
            let nodes = model.record_pair(&mut ctx, user, corpus.job(*job_id)?, state.as_ref())?;
            items.push(ScoredItem {
                job_id: *job_id,
                score: ctx.tape.scalar(nodes.y_hat),
                label: *label,
            });
        }
        out.push(ScoredGroup {
            user_id: g.user_id,
            items,
        });
    }
    Ok(out)
}

pub fn evaluate(model: &Model, corpus: &Corpus, groups: &[ImpressionGroup], weighting: GaucWeighting) -> Result<EvalReport> {
    metrics::evaluate_groups(&score_groups(model, corpus, groups)?, weighting)
}

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the best validation GAUC. `clock` returns seconds and is only
/// used for the log.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    train_groups: &[ImpressionGroup],
    val_groups: &[ImpressionGroup],
    cfg: &TrainConfig,
    clock: &mut dyn FnMut() -> f64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_groups.is_empty() {
        bail!(Validation, "empty training set");
    }
    let train_ids: alloc::collections::BTreeSet<u64> = train_groups.iter().map(|g| g.impression_id).collect();
    if val_groups.iter().any(|g| train_ids.contains(&g.impression_id)) {
        bail!(Validation, "training and validation sets share impressions");
    }
    let started = clock();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params(), cfg.learning_rate);
    let dropout = model.config().dropout;
    let mut order: Vec<usize> = (0..train_groups.len()).collect();
    let mut best: Option<(usize, f64, crate::tensor::ParamStore)> = None;
    let mut log = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total_loss, mut pairs) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::new();
            for &i in chunk {
                let g = &train_groups[i];
                let user = corpus.user(g.user_id)?;
                for (job_id, label) in &g.items {
                    batch.push((user, corpus.job(*job_id)?, *label));
                }
            }
            let mut tape = Tape::new();
            let loss = {
                let mut ctx = Ctx::new(&mut tape, model.params()).with_dropout(dropout, &mut rng);
                model.batch_loss(&mut ctx, &batch)?
            };
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: value,
                    batch: batch.iter().map(|(u, j, l)| (u.user_id, j.job_id, *l)).collect(),
                });
            }
            total_loss += value;
            pairs += batch.len();
            model.params_mut().zero_grad();
            tape.backward(loss, Some(model.params_mut()))?;
            adam_step(model.params_mut(), &mut adam)?;
        }

        let val_gauc = evaluate(model, corpus, val_groups, cfg.gauc_weighting)?.gauc;
        let entry = EpochLog {
            epoch,
            train_loss: total_loss / pairs as f64,
            val_gauc,
            elapsed_seconds: clock() - started,
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, val GAUC {val_gauc:.5}",
            entry.train_loss
        );
        log.push(entry);
        if best.as_ref().map_or(true, |(_, g, _)| val_gauc > *g) {
            let mut snapshot = model.params().clone();
            snapshot.clear_grad();
            best = Some((epoch, val_gauc, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_gauc, snapshot) = best.expect("at least one epoch ran");
    model.params_mut().load_values_from(&snapshot)?;
    model.params_mut().clear_grad();
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_gauc,
    })
}
