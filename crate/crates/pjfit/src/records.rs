//! Line-delimited record files.
//!
//! Every record file holds one JSON object per line, UTF-8, with the fields
//! in the order below. Unknown fields are rejected.
//!
//! | file               | fields                                                        |
//! |--------------------|---------------------------------------------------------------|
//! | `candidates.txt`   | `user_id`, `resume`, `history: [{query, job_id, timestamp}]`  |
//! | `jobs.txt`         | `job_id`, `description`                                       |
//! | `interactions.txt` | `user_id`, `job_id`, `label`, `impression_id`, `timestamp`    |
//! | `vocab.txt`        | one token per line, no whitespace inside a token              |
//!
//! Texts are whitespace-separated tokens. Timestamps are seconds; day `d`
//! spans `[86400·d, 86400·(d+1))`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use pjfit_core::data::{CandidateRecord, InteractionRecord, JobRecord, SyntheticData};
use pjfit_core::encoders::{Vocabulary, RESERVED};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const CANDIDATES_FILE: &str = "candidates.txt";
pub const JOBS_FILE: &str = "jobs.txt";
pub const INTERACTIONS_FILE: &str = "interactions.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

pub fn save_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Writes the ordinary tokens of a vocabulary, one per line.
pub fn save_vocab(path: &Path, tokens: &[String]) -> Result<()> {
    let mut text = String::with_capacity(tokens.len() * 6);
    for t in tokens {
        text.push_str(t);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if line.is_empty() || line.chars().any(char::is_whitespace) {
            return Err(parse(format!("token {line:?} is empty or contains whitespace")));
        }
        if RESERVED.contains(&line) {
            return Err(parse(format!("reserved token {line} must not be listed")));
        }
        tokens.push(line);
    }
    Vocabulary::from_tokens(tokens).map_err(Error::from)
}

/// The record files of one data directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DataDir {
    pub vocab: Vocabulary,
    pub candidates: Vec<CandidateRecord>,
    pub jobs: Vec<JobRecord>,
    pub interactions: Vec<InteractionRecord>,
}

impl DataDir {
    pub fn files(dir: &Path) -> [PathBuf; 4] {
        [VOCAB_FILE, CANDIDATES_FILE, JOBS_FILE, INTERACTIONS_FILE].map(|f| dir.join(f))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            vocab: load_vocab(&dir.join(VOCAB_FILE))?,
            candidates: load_records(&dir.join(CANDIDATES_FILE))?,
            jobs: load_records(&dir.join(JOBS_FILE))?,
            interactions: load_records(&dir.join(INTERACTIONS_FILE))?,
        })
    }
}

/// Writes generated data. The generator's latent categories are not part
/// of any record type and are never written.
pub fn save_synthetic(dir: &Path, data: &SyntheticData) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [vocab, candidates, jobs, interactions] = DataDir::files(dir);
    save_vocab(&vocab, &data.vocabulary)?;
    save_records(&candidates, &data.candidates)?;
    save_records(&jobs, &data.jobs)?;
    save_records(&interactions, &data.interactions)?;
    Ok(vec![vocab, candidates, jobs, interactions])
}
