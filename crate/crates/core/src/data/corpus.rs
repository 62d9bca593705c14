use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::{CandidateRecord, InteractionRecord, JobRecord};
use crate::encoders::Vocabulary;
use crate::error::{bail, Error, Result};
use crate::model::{Dimensions, HistoryItem, JobView, UserView};

/// Tokenised users and jobs, indexed by ID, with search histories cut at a
/// fixed time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    vocab: Vocabulary,
    users: Vec<UserView>,
    jobs: Vec<JobView>,
    history_cutoff: u64,
}

/// One ranked list: the interactions sharing an impression ID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpressionGroup {
    pub impression_id: u64,
    pub user_id: u32,
    /// `(job_id, label)` in record order.
    pub items: Vec<(u32, u8)>,
}

impl ImpressionGroup {
    /// Groups records by impression ID, ordered by ID.
    pub fn collect(records: &[InteractionRecord]) -> Result<Vec<Self>> {
        let mut groups: BTreeMap<u64, ImpressionGroup> = BTreeMap::new();
        for r in records {
            let g = groups.entry(r.impression_id).or_insert_with(|| ImpressionGroup {
                impression_id: r.impression_id,
                user_id: r.user_id,
                items: Vec::new(),
            });
            if g.user_id != r.user_id {
                bail!(Validation, "impression {} mixes users {} and {}", r.impression_id, g.user_id, r.user_id);
            }
            if r.label > 1 {
                bail!(Validation, "impression {} has label {}", r.impression_id, r.label);
            }
            g.items.push((r.job_id, r.label));
        }
        Ok(groups.into_values().collect())
    }

    pub fn positives(&self) -> usize {
        self.items.iter().filter(|(_, l)| *l == 1).count()
    }
}

fn dense_index<T>(ids: impl Iterator<Item = u32>, what: &str, items: &[T]) -> Result<Vec<usize>> {
    let mut slots = alloc::vec![usize::MAX; items.len()];
    for (pos, id) in ids.enumerate() {
        let Some(slot) = slots.get_mut(id as usize) else {
            bail!(Validation, "{what} ids must be dense: {id} with only {} records", items.len());
        };
        if *slot != usize::MAX {
            bail!(Validation, "duplicate {what} id {id}");
        }
        *slot = pos;
    }
    Ok(slots)
}

impl Corpus {
    /// Tokenises records. History entries at or after `history_cutoff` are
    /// hidden from the model.
    pub fn build(vocab: Vocabulary, candidates: &[CandidateRecord], jobs: &[JobRecord], history_cutoff: u64) -> Result<Self> {
        let job_slots = dense_index(jobs.iter().map(|j| j.job_id), "job", jobs)?;
        let mut job_views = Vec::with_capacity(jobs.len());
        for slot in job_slots {
            let j = &jobs[slot];
            let description = vocab.tokenize(&j.description);
            if description.is_empty() {
                bail!(Validation, "job {} has an empty description", j.job_id);
            }
            job_views.push(JobView {
                job_id: j.job_id,
                description,
            });
        }
        let user_slots = dense_index(candidates.iter().map(|c| c.user_id), "user", candidates)?;
        let mut users = Vec::with_capacity(candidates.len());
        for slot in user_slots {
            let c = &candidates[slot];
            let resume = vocab.tokenize(&c.resume);
            if resume.is_empty() {
                bail!(Validation, "user {} has an empty resume", c.user_id);
            }
            let mut entries: Vec<_> = c.history.iter().filter(|h| h.timestamp < history_cutoff).collect();
            entries.sort_by_key(|h| h.timestamp);
            let mut history = Vec::with_capacity(entries.len());
            for h in entries {
                let query = vocab.tokenize(&h.query);
                if query.is_empty() {
                    bail!(Validation, "user {} has an empty history query", c.user_id);
                }
                if h.job_id as usize >= jobs.len() {
                    bail!(Validation, "user {} history references unknown job {}", c.user_id, h.job_id);
                }
                history.push(HistoryItem { query, job_id: h.job_id });
            }
            users.push(UserView {
                user_id: c.user_id,
                resume,
                history,
            });
        }
        Ok(Self {
            vocab,
            users,
            jobs: job_views,
            history_cutoff,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn history_cutoff(&self) -> u64 {
        self.history_cutoff
    }

    pub fn dims(&self) -> Dimensions {
        Dimensions {
            vocab_size: self.vocab.len(),
            num_users: self.users.len(),
            num_jobs: self.jobs.len(),
        }
    }

    pub fn users(&self) -> &[UserView] {
        &self.users
    }

    pub fn users_mut(&mut self) -> &mut [UserView] {
        &mut self.users
    }

    pub fn jobs(&self) -> &[JobView] {
        &self.jobs
    }

    pub fn user(&self, id: u32) -> Result<&UserView> {
        self.users
            .get(id as usize)
            .ok_or_else(|| Error::Lookup(alloc::format!("unknown user {id}")))
    }

    pub fn job(&self, id: u32) -> Result<&JobView> {
        self.jobs
            .get(id as usize)
            .ok_or_else(|| Error::Lookup(alloc::format!("unknown job {id}")))
    }

    /// Checks that every record references a known user and job.
    pub fn check_references(&self, records: &[InteractionRecord]) -> Result<()> {
        for r in records {
            self.user(r.user_id)?;
            self.job(r.job_id)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::HistoryEntry;
    use alloc::string::ToString;
    use alloc::vec;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["a", "b", "c"]).unwrap()
    }

    fn job(id: u32) -> JobRecord {
        JobRecord {
            job_id: id,
            description: "a b".to_string(),
        }
    }

    #[test]
    fn history_is_cut_at_the_cutoff() {
        let cand = CandidateRecord {
            user_id: 0,
            resume: "c".to_string(),
            history: [30, 10, 20]
                .into_iter()
                .map(|t| HistoryEntry {
                    query: "b".to_string(),
                    job_id: 1,
                    timestamp: t,
                })
                .collect(),
        };
        let corpus = Corpus::build(vocab(), &[cand], &[job(1), job(0)], 25).unwrap();
        assert_eq!(corpus.users()[0].history.len(), 2);
        assert_eq!(corpus.jobs()[1].job_id, 1);
    }

    #[test]
    fn sparse_ids_are_rejected() {
        assert!(Corpus::build(vocab(), &[], &[job(0), job(5)], 0).is_err());
        assert!(Corpus::build(vocab(), &[], &[job(0), job(0)], 0).is_err());
    }

    #[test]
    fn groups_collect_in_id_order() {
        let rec = |impression_id, job_id, label| InteractionRecord {
            user_id: 2,
            job_id,
            label,
            impression_id,
            timestamp: 0,
        };
        let groups = ImpressionGroup::collect(&[rec(5, 1, 0), rec(3, 2, 1), rec(5, 4, 1)]).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].impression_id, 3);
        assert_eq!(groups[1].items, vec![(1, 0), (4, 1)]);
    }
}
