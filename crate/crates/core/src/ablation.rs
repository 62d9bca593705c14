//! Trains several model variants on the same splits and tabulates their
//! test metrics.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, ImpressionGroup};
use crate::error::{bail, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::train::{self, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub gauc: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub mrr: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_gauc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub struct AblationData<'a> {
    pub corpus: &'a Corpus,
    pub train: &'a [ImpressionGroup],
    pub val: &'a [ImpressionGroup],
    pub test: &'a [ImpressionGroup],
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

impl AblationTable {
    /// Median over seeds of a metric for one variant.
    pub fn median(&self, variant: Variant, metric: impl Fn(&AblationRow) -> f64) -> Option<f64> {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(metric).collect();
        (!xs.is_empty()).then(|| median(xs))
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut vs: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !vs.contains(&r.variant) {
                vs.push(r.variant);
            }
        }
        vs
    }

    /// One line per variant with seed-median metrics.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>5} {:>8} {:>8} {:>8} {:>8}", "variant", "runs", "GAUC", "R@1", "R@5", "MRR");
        for v in self.variants() {
            let runs = self.rows.iter().filter(|r| r.variant == v).count();
            let m = |f: fn(&AblationRow) -> f64| self.median(v, f).unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "{:<10} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                v.as_str(),
                runs,
                m(|r| r.gauc),
                m(|r| r.recall_at_1),
                m(|r| r.recall_at_5),
                m(|r| r.mrr)
            );
        }
        out
    }
}

/// Trains every variant once per seed. For each seed all variants start
/// from the same initial values of the parameters they share.
pub fn run_ablation(
    data: &AblationData<'_>,
    variants: &[Variant],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
    clock: &mut dyn FnMut() -> f64,
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        bail!(Config, "ablation needs at least one variant and one seed");
    }
    let mut table = AblationTable::default();
    for &seed in seeds {
        let base_config = ModelConfig {
            variant: Variant::Full,
            ..model_config.clone()
        };
        let base = Model::new(base_config, data.corpus.dims(), seed)?;
        for &variant in variants {
            let mut model = base.derive_variant(variant, seed)?;
            let cfg = TrainConfig {
                seed,
                ..train_config.clone()
            };
            let outcome = train::train(&mut model, data.corpus, data.train, data.val, &cfg, clock)?;
            let report = train::evaluate(&model, data.corpus, data.test, cfg.gauc_weighting)?;
            log::info!("{variant} seed {seed}: test GAUC {:.4}", report.gauc);
            table.rows.push(AblationRow {
                variant,
                seed,
                gauc: report.gauc,
                recall_at_1: report.recall_at_1,
                recall_at_5: report.recall_at_5,
                mrr: report.mrr,
                best_epoch: outcome.best_epoch,
                epochs_run: outcome.epochs_run(),
                best_val_gauc: outcome.best_val_gauc,
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn row(variant: Variant, gauc: f64) -> AblationRow {
        AblationRow {
            variant,
            seed: 0,
            gauc,
            recall_at_1: 0.0,
            recall_at_5: 0.0,
            mrr: 0.0,
            best_epoch: 1,
            epochs_run: 1,
            best_val_gauc: 0.0,
        }
    }

    #[test]
    fn median_over_seeds() {
        let table = AblationTable {
            rows: vec![row(Variant::Full, 0.7), row(Variant::Full, 0.6), row(Variant::Full, 0.9), row(Variant::NoQ, 0.5)],
        };
        assert_eq!(table.median(Variant::Full, |r| r.gauc), Some(0.7));
        assert_eq!(table.median(Variant::NoJ, |r| r.gauc), None);
        let text = table.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("0.7000"));
    }
}
