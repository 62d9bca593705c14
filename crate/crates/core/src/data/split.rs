use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::InteractionRecord;
use crate::error::{bail, Result};

pub const SECONDS_PER_DAY: u64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Day index (timestamp / 86400) of the first day of the log.
    pub first_day: u64,
    /// Number of days covered by the log.
    pub days: u64,
    pub val_days: u64,
    pub test_days: u64,
}

impl SplitConfig {
    pub fn val_start(&self) -> u64 {
        (self.first_day + self.days - self.val_days - self.test_days) * SECONDS_PER_DAY
    }

    pub fn test_start(&self) -> u64 {
        (self.first_day + self.days - self.test_days) * SECONDS_PER_DAY
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<InteractionRecord>,
    pub val: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    /// Search history visible to the model ends strictly before this time.
    pub history_cutoff: u64,
}

/// Partitions records by day: the last `test_days` days go to test, the
/// `val_days` before them to validation, the rest to training.
pub fn temporal_split(records: &[InteractionRecord], cfg: &SplitConfig) -> Result<Split> {
    if cfg.days < cfg.val_days + cfg.test_days + 1 {
        bail!(
            Validation,
            "a {}-day log cannot hold {} validation and {} test days plus training data",
            cfg.days,
            cfg.val_days,
            cfg.test_days
        );
    }
    let start = cfg.first_day * SECONDS_PER_DAY;
    let end = (cfg.first_day + cfg.days) * SECONDS_PER_DAY;
    let (val_start, test_start) = (cfg.val_start(), cfg.test_start());
    let mut group_time: BTreeMap<u64, u64> = BTreeMap::new();
    let mut split = Split {
        history_cutoff: val_start,
        ..Split::default()
    };
    for r in records {
        if r.timestamp < start || r.timestamp >= end {
            bail!(Validation, "impression {} at {} lies outside the configured day span", r.impression_id, r.timestamp);
        }
        if *group_time.entry(r.impression_id).or_insert(r.timestamp) != r.timestamp {
            bail!(Validation, "impression {} has records with different timestamps", r.impression_id);
        }
        let bucket = if r.timestamp >= test_start {
            &mut split.test
        } else if r.timestamp >= val_start {
            &mut split.val
        } else {
            &mut split.train
        };
        bucket.push(*r);
    }
    Ok(split)
}
