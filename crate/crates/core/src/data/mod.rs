//! Record schemas, the synthetic log generator, temporal splitting and
//! impression-grouped negative sampling.

mod corpus;
mod generator;
mod split;

pub use corpus::{Corpus, ImpressionGroup};
pub use generator::{generate_synthetic, sample_negatives, ExposureGroup, GeneratorConfig, GroundTruth, SyntheticData};
pub use split::{temporal_split, Split, SplitConfig, SECONDS_PER_DAY};

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEntry {
    /// Whitespace-separated query tokens.
    pub query: String,
    pub job_id: u32,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub user_id: u32,
    /// Whitespace-separated resume tokens.
    pub resume: String,
    /// Search-channel history, oldest first.
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRecord {
    pub job_id: u32,
    /// Whitespace-separated description tokens.
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionRecord {
    pub user_id: u32,
    pub job_id: u32,
    pub label: u8,
    pub impression_id: u64,
    pub timestamp: u64,
}

impl InteractionRecord {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}
