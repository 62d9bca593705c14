//! Ranking metrics: per-user AUC, grouped AUC, Recall@K and MRR.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub job_id: u32,
    pub score: f64,
    pub label: u8,
}

/// The scored items of one impression group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup {
    pub user_id: u32,
    pub items: Vec<ScoredItem>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaucWeighting {
    /// Plain mean over users.
    #[default]
    Unweighted,
    /// Mean weighted by the number of scored items per user.
    Impressions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gauc: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub mrr: f64,
    pub per_user_auc: BTreeMap<u32, f64>,
    /// Users without both a positive and a negative.
    pub skipped_users: usize,
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counting
/// one half. `None` unless both classes are present.
pub fn per_user_auc(scores: &[(f64, u8)]) -> Option<f64> {
    let positives = scores.iter().filter(|(_, l)| *l == 1).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, u8)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks (doubled, 1-based) of the positives.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let twice_midrank = (i + 1 + j) as u64;
        let tied_positives = sorted[i..j].iter().filter(|(_, l)| *l == 1).count() as u64;
        twice_rank_sum += twice_midrank * tied_positives;
        i = j;
    }
    let (p, n) = (positives as u64, negatives as u64);
    let twice_wins = twice_rank_sum - p * (p + 1);
    Some(twice_wins as f64 / (2 * p * n) as f64)
}

/// Mean of per-user AUCs; each entry pairs an AUC with the user's item count.
pub fn gauc(per_user: &[(f64, usize)], weighting: GaucWeighting) -> Result<f64> {
    if per_user.is_empty() {
        bail!(Evaluation, "no user has both a positive and a negative");
    }
    Ok(match weighting {
        GaucWeighting::Unweighted => per_user.iter().map(|(a, _)| a).sum::<f64>() / per_user.len() as f64,
        GaucWeighting::Impressions => {
            let total: usize = per_user.iter().map(|(_, w)| w).sum();
            per_user.iter().map(|(a, w)| a * *w as f64).sum::<f64>() / total as f64
        }
    })
}

fn ranking_order(a: &ScoredItem, b: &ScoredItem) -> Ordering {
    // `+ 0.0` folds -0.0 into 0.0 so the two tie.
    (b.score + 0.0).total_cmp(&(a.score + 0.0)).then(a.job_id.cmp(&b.job_id))
}

/// Sorts by descending score, ties by ascending job ID.
pub fn rank_items(items: &mut [ScoredItem]) {
    items.sort_by(ranking_order);
}

/// 1-based rank of the single positive of a group.
pub fn positive_rank(items: &[ScoredItem]) -> Result<usize> {
    let mut positives = items.iter().filter(|i| i.label == 1);
    let (Some(pos), None) = (positives.next(), positives.next()) else {
        bail!(Evaluation, "an impression group must hold exactly one positive");
    };
    Ok(1 + items.iter().filter(|i| ranking_order(i, pos) == Ordering::Less).count())
}

fn check_scores(groups: &[ScoredGroup]) -> Result<()> {
    if groups.is_empty() {
        bail!(Evaluation, "no impression groups to evaluate");
    }
    if groups.iter().flat_map(|g| &g.items).any(|i| !i.score.is_finite()) {
        bail!(Evaluation, "non-finite score");
    }
    Ok(())
}

pub fn recall_at_k(groups: &[ScoredGroup], k: usize) -> Result<f64> {
    check_scores(groups)?;
    let mut hits = 0usize;
    for g in groups {
        if positive_rank(&g.items)? <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / groups.len() as f64)
}

pub fn mrr(groups: &[ScoredGroup]) -> Result<f64> {
    check_scores(groups)?;
    // Summed by rank so the result does not depend on group order.
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for g in groups {
        *counts.entry(positive_rank(&g.items)?).or_default() += 1;
    }
    let total: f64 = counts.iter().map(|(rank, n)| *n as f64 / *rank as f64).sum();
    Ok(total / groups.len() as f64)
}

/// All metrics over a set of scored impression groups. Per-user AUC pools
/// every item the user was shown.
pub fn evaluate_groups(groups: &[ScoredGroup], weighting: GaucWeighting) -> Result<EvalReport> {
    check_scores(groups)?;
    let mut by_user: BTreeMap<u32, Vec<(f64, u8)>> = BTreeMap::new();
    for g in groups {
        by_user
            .entry(g.user_id)
            .or_default()
            .extend(g.items.iter().map(|i| (i.score, i.label)));
    }
    let mut per_user_auc = BTreeMap::new();
    let mut weighted = Vec::new();
    let mut skipped_users = 0;
    for (user, scores) in &by_user {
        match self::per_user_auc(scores) {
            Some(a) => {
                per_user_auc.insert(*user, a);
                weighted.push((a, scores.len()));
            }
            None => skipped_users += 1,
        }
    }
    Ok(EvalReport {
        gauc: gauc(&weighted, weighting)?,
        recall_at_1: recall_at_k(groups, 1)?,
        recall_at_5: recall_at_k(groups, 5)?,
        mrr: mrr(groups)?,
        per_user_auc,
        skipped_users,
    })
}
