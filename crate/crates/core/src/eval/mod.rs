//! Leave-one-out ranking evaluation: every test item is ranked against
//! popularity-sampled negatives, and HR@5, HR@10 and MRR are reported for
//! the head, tail and all groups of the ground-truth item.

mod baselines;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DataError, LeaveOneOutSplit, NegativeSampler, PopularityPartition};
use crate::model::{ModelError, RecModel};
use crate::rng;

pub use baselines::{
    fomc_rank, pop_rank, rerank_by_popularity, spop_rank, FomcScorer, PopScorer, RerankScorer, SpopScorer,
    Transitions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid evaluation input: {0}")]
    Input(String),
}

pub fn hit_ratio(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn reciprocal_rank(rank: usize) -> f64 {
    1.0 / rank as f64
}

/// 1-based rank of `candidates[0]` (the ground truth). Ties are broken by
/// ascending item index.
pub fn rank_of_truth(scores: &[f64], candidates: &[usize]) -> usize {
    let (s0, i0) = (scores[0], candidates[0]);
    1 + scores[1..]
        .iter()
        .zip(&candidates[1..])
        .filter(|&(&s, &i)| s > s0 || (s == s0 && i < i0))
        .count()
}

/// Anything that scores a candidate list given a history.
pub trait Scorer: Sync {
    fn score(&self, history: &[usize], candidates: &[usize]) -> Result<Vec<f64>, EvalError>;
}

impl Scorer for RecModel {
    fn score(&self, history: &[usize], candidates: &[usize]) -> Result<Vec<f64>, EvalError> {
        let m = self.user_state(history)?;
        Ok(self.score_items(&m, candidates)?)
    }
}

/// One ranking problem: the truth is `candidates[0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user: usize,
    pub history: Vec<usize>,
    pub candidates: Vec<usize>,
}

impl EvalCase {
    pub fn truth(&self) -> usize {
        self.candidates[0]
    }
}

/// Which held-out item plays the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Valid,
    Test,
}

/// Build one case per user. Negatives come from a per-user stream so the
/// same seed yields the same candidates for every model.
pub fn build_cases(
    split: &LeaveOneOutSplit,
    sampler: &NegativeSampler,
    n_negatives: usize,
    max_len: usize,
    target: Target,
    seed: u64,
) -> Result<Vec<EvalCase>, EvalError> {
    let tag = match target {
        Target::Valid => 1,
        Target::Test => 2,
    };
    split
        .users
        .par_iter()
        .enumerate()
        .map(|(u, s)| {
            let (history, truth) = match target {
                Target::Valid => (s.train.clone(), s.valid),
                Target::Test => (s.history_for_test(), s.test),
            };
            let start = history.len().saturating_sub(max_len);
            let mut r = rng::derive(seed, &[rng::stream::EVAL, tag, u as u64]);
            let negs = sampler.sample(truth, &s.full_sequence(), n_negatives, &mut r)?;
            let mut candidates = Vec::with_capacity(n_negatives + 1);
            candidates.push(truth);
            candidates.extend(negs);
            Ok(EvalCase { user: u, history: history[start..].to_vec(), candidates })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub hr5: f64,
    pub hr10: f64,
    pub mrr: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub hr10: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub head: GroupMetrics,
    pub tail: GroupMetrics,
    pub all: GroupMetrics,
    /// Cases whose truth is a head item while the history holds a tail item.
    pub slice_head_with_tail: SliceMetrics,
    #[serde(default)]
    pub config_echo: serde_json::Value,
}

#[derive(Clone, Copy, Debug, Default)]
struct Acc {
    hr5: f64,
    hr10: f64,
    mrr: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, rank: usize) {
        self.hr5 += hit_ratio(rank, 5);
        self.hr10 += hit_ratio(rank, 10);
        self.mrr += reciprocal_rank(rank);
        self.n += 1;
    }

    fn finish(self) -> GroupMetrics {
        let d = self.n.max(1) as f64;
        GroupMetrics { hr5: self.hr5 / d, hr10: self.hr10 / d, mrr: self.mrr / d, support: self.n }
    }
}

/// Per-case outcome, kept for audit output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRank {
    pub user: usize,
    pub truth: usize,
    pub rank: usize,
    pub tail: bool,
}

/// Rank every case; cases are scored in parallel and summed in order.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    cases: &[EvalCase],
    partition: &PopularityPartition,
) -> Result<(MetricsReport, Vec<CaseRank>), EvalError> {
    let ranks: Vec<usize> = cases
        .par_iter()
        .map(|c| {
            let s = scorer.score(&c.history, &c.candidates)?;
            if s.len() != c.candidates.len() {
                return Err(EvalError::Input("scorer returned wrong number of scores".into()));
            }
            Ok(rank_of_truth(&s, &c.candidates))
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(summarize(cases, &ranks, partition))
}

pub fn summarize(
    cases: &[EvalCase],
    ranks: &[usize],
    partition: &PopularityPartition,
) -> (MetricsReport, Vec<CaseRank>) {
    let (mut head, mut tail, mut all, mut slice) = (Acc::default(), Acc::default(), Acc::default(), Acc::default());
    let mut out = Vec::with_capacity(cases.len());
    for (c, &rank) in cases.iter().zip(ranks) {
        let is_tail = partition.is_tail(c.truth());
        if is_tail {
            tail.add(rank);
        } else {
            head.add(rank);
            if c.history.iter().any(|&i| partition.is_tail(i)) {
                slice.add(rank);
            }
        }
        all.add(rank);
        out.push(CaseRank { user: c.user, truth: c.truth(), rank, tail: is_tail });
    }
    let s = slice.finish();
    let report = MetricsReport {
        head: head.finish(),
        tail: tail.finish(),
        all: all.finish(),
        slice_head_with_tail: SliceMetrics { hr10: s.hr10, support: s.support },
        config_echo: serde_json::Value::Null,
    };
    (report, out)
}

/// Per-metric `after − before`.
pub fn delta(before: &MetricsReport, after: &MetricsReport) -> serde_json::Value {
    let g = |a: &GroupMetrics, b: &GroupMetrics| {
        serde_json::json!({ "hr5": a.hr5 - b.hr5, "hr10": a.hr10 - b.hr10, "mrr": a.mrr - b.mrr })
    };
    serde_json::json!({
        "head": g(&after.head, &before.head),
        "tail": g(&after.tail, &before.tail),
        "all": g(&after.all, &before.all),
        "slice_head_with_tail": { "hr10": after.slice_head_with_tail.hr10 - before.slice_head_with_tail.hr10 },
    })
}

/// Audit CSV: `user,truth,rank,group`.
pub fn write_ranks_csv<W: Write>(w: W, ranks: &[CaseRank]) -> std::io::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["user", "truth", "rank", "group"])?;
    for r in ranks {
        wr.write_record([
            r.user.to_string(),
            r.truth.to_string(),
            r.rank.to_string(),
            (if r.tail { "tail" } else { "head" }).to_string(),
        ])?;
    }
    wr.flush()
}

#[cfg(test)]
mod tests;
