//! All-ranking top-K evaluation: every item is scored for every user, known
//! interactions are masked, and Recall@K / NDCG@K are averaged over users that
//! have held-out items.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::model::{self, ForwardArtifacts, ModelConfig, ModelGraphs, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Val,
    Test,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Val => "val",
            Phase::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user: usize,
    /// Top-`max(cutoffs)` item ids.
    pub ranked: Vec<usize>,
    pub hits: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub phase: Phase,
    pub cutoffs: Vec<usize>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users_evaluated: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_user: Option<Vec<UserRecord>>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// In the test phase, also hide the user's validation items.
    pub mask_val_in_test: bool,
    pub keep_per_user: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mask_val_in_test: true,
            keep_per_user: false,
        }
    }
}

/// Descending score, then ascending item id.
#[inline]
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Full ranking of unmasked items. `mask` must be sorted.
pub fn rank_by_scores(scores: &[f64], mask: &[usize]) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len())
        .filter(|i| mask.binary_search(i).is_err())
        .collect();
    items.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    items
}

/// The first `k` entries of [`rank_by_scores`], without sorting the whole catalog.
pub fn top_k_by_scores(scores: &[f64], mask: &[usize], k: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len())
        .filter(|i| mask.binary_search(i).is_err())
        .collect();
    if k < items.len() {
        if k > 0 {
            items.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        }
        items.truncate(k);
    }
    items.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    items
}

/// Ranks items for one user embedding; `mask` must be sorted.
pub fn rank_items(user: &[f64], items: &DenseMatrix, mask: &[usize]) -> Result<Vec<usize>> {
    let scores = model::predict_scores(user, items)?;
    Ok(rank_by_scores(&scores, mask))
}

/// `|top-K ∩ relevant| / |relevant|`; `relevant` must be sorted and non-empty.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    debug_assert!(!relevant.is_empty());
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.binary_search(i).is_ok())
        .count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with `log2(rank + 1)` discounts and the ideal DCG
/// truncated at `min(|relevant|, K)`.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    debug_assert!(!relevant.is_empty() && k >= 1);
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(k))
        .map(|pos| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    dcg / ideal
}

/// Runs one forward pass and evaluates the requested phase.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &ModelGraphs,
    features: &[DenseMatrix],
    split: &SplitDataset,
    phase: Phase,
    cutoffs: &[usize],
    opts: EvalOptions,
) -> Result<EvalReport> {
    let artifacts = model::forward(params, cfg, graphs, features)?;
    evaluate_artifacts(&artifacts, split, phase, cutoffs, opts)
}

/// Items hidden from a user's ranking in the given phase.
pub fn phase_mask(split: &SplitDataset, user: usize, phase: Phase, val_items: &[Vec<usize>], opts: EvalOptions) -> Vec<usize> {
    let mut mask = split.train_items_by_user[user].clone();
    if phase == Phase::Test && opts.mask_val_in_test {
        mask.extend(&val_items[user]);
        mask.sort_unstable();
    }
    mask
}

pub fn evaluate_artifacts(
    artifacts: &ForwardArtifacts,
    split: &SplitDataset,
    phase: Phase,
    cutoffs: &[usize],
    opts: EvalOptions,
) -> Result<EvalReport> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::Config("cutoffs must be non-empty and positive".into()));
    }
    let mut cutoffs = cutoffs.to_vec();
    cutoffs.sort_unstable();
    cutoffs.dedup();
    let max_k = *cutoffs.last().unwrap();

    let items = artifacts.item_embeddings();
    let val_items = split.val_items_by_user();
    let truth = match phase {
        Phase::Val => val_items.clone(),
        Phase::Test => split.test_items_by_user(),
    };

    let per_user: Vec<Option<(Vec<f64>, Vec<f64>, UserRecord)>> = (0..split.n_users())
        .into_par_iter()
        .map(|u| {
            let relevant = &truth[u];
            if relevant.is_empty() {
                return Ok(None);
            }
            let scores = model::predict_scores(artifacts.user_embedding(u), &items)?;
            let mask = phase_mask(split, u, phase, &val_items, opts);
            let ranked = top_k_by_scores(&scores, &mask, max_k);
            let recalls = cutoffs.iter().map(|&k| recall_at_k(&ranked, relevant, k)).collect();
            let ndcgs = cutoffs.iter().map(|&k| ndcg_at_k(&ranked, relevant, k)).collect();
            let hits = ranked
                .iter()
                .copied()
                .filter(|i| relevant.binary_search(i).is_ok())
                .collect();
            Ok(Some((recalls, ndcgs, UserRecord { user: u, ranked, hits })))
        })
        .collect::<Result<_>>()?;

    // Summed in user order so the result does not depend on the thread count.
    let mut recall_sum = vec![0.0; cutoffs.len()];
    let mut ndcg_sum = vec![0.0; cutoffs.len()];
    let mut n_eval = 0usize;
    let mut records = Vec::new();
    for (r, n, rec) in per_user.into_iter().flatten() {
        n_eval += 1;
        recall_sum.iter_mut().zip(&r).for_each(|(s, v)| *s += v);
        ndcg_sum.iter_mut().zip(&n).for_each(|(s, v)| *s += v);
        if opts.keep_per_user {
            records.push(rec);
        }
    }
    let mean = |s: f64| if n_eval > 0 { s / n_eval as f64 } else { 0.0 };
    Ok(EvalReport {
        phase,
        recall: cutoffs.iter().zip(&recall_sum).map(|(&k, &s)| (k, mean(s))).collect(),
        ndcg: cutoffs.iter().zip(&ndcg_sum).map(|(&k, &s)| (k, mean(s))).collect(),
        cutoffs,
        n_users_evaluated: n_eval,
        seed: None,
        config_hash: None,
        per_user: opts.keep_per_user.then_some(records),
    })
}

/// Expected Recall@K of a uniformly random ranking, averaged over evaluated users:
/// `min(K, n_candidates) / n_candidates` with `n_candidates = n_items - |mask|`.
pub fn random_recall_expectation(split: &SplitDataset, phase: Phase, k: usize, opts: EvalOptions) -> f64 {
    let val_items = split.val_items_by_user();
    let truth = match phase {
        Phase::Val => val_items.clone(),
        Phase::Test => split.test_items_by_user(),
    };
    let mut total = 0.0;
    let mut n = 0usize;
    for u in 0..split.n_users() {
        if truth[u].is_empty() {
            continue;
        }
        let candidates = split.n_items() - phase_mask(split, u, phase, &val_items, opts).len();
        total += k.min(candidates) as f64 / candidates as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}
