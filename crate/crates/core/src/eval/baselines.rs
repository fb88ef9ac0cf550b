//! Popularity, session-popularity, first-order Markov and popularity
//! re-ranking baselines. Each ranker breaks its last tie by ascending item
//! index, matching [`super::rank_of_truth`].

use std::collections::BTreeMap;

use super::{EvalError, Scorer};
use crate::dataset::LeaveOneOutSplit;

fn by_keys(n: usize, key: impl Fn(usize) -> (u64, u64)) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key(b).cmp(&key(a)).then(a.cmp(&b)));
    order
}

/// All items by training popularity, descending.
pub fn pop_rank(popularity: &[u64]) -> Vec<usize> {
    by_keys(popularity.len(), |i| (popularity[i], 0))
}

fn counts_in(seq: &[usize], n: usize) -> Vec<u64> {
    let mut c = vec![0u64; n];
    for &i in seq.iter().filter(|&&i| i < n) {
        c[i] += 1;
    }
    c
}

/// Items by count within `seq`, then by global popularity.
pub fn spop_rank(seq: &[usize], popularity: &[u64]) -> Vec<usize> {
    let c = counts_in(seq, popularity.len());
    by_keys(popularity.len(), |i| (c[i], popularity[i]))
}

/// Bigram counts over the training prefixes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transitions {
    next: BTreeMap<usize, BTreeMap<usize, u64>>,
}

impl Transitions {
    pub fn from_split(split: &LeaveOneOutSplit) -> Self {
        let mut t = Self::default();
        for seq in split.train_sequences() {
            for w in seq.windows(2) {
                t.add(w[0], w[1]);
            }
        }
        t
    }

    pub fn add(&mut self, from: usize, to: usize) {
        *self.next.entry(from).or_default().entry(to).or_insert(0) += 1;
    }

    pub fn count(&self, from: usize, to: usize) -> u64 {
        self.next.get(&from).and_then(|m| m.get(&to)).copied().unwrap_or(0)
    }

    pub fn has_source(&self, from: usize) -> bool {
        self.next.contains_key(&from)
    }
}

/// Items by transition count from `last`, then by popularity. An unseen
/// `last` degrades to pure popularity order.
pub fn fomc_rank(last: usize, transitions: &Transitions, popularity: &[u64]) -> Vec<usize> {
    by_keys(popularity.len(), |i| (transitions.count(last, i), popularity[i]))
}

/// Reorder a pre-ranked list ascending by popularity (stable) and keep `k`.
pub fn rerank_by_popularity(pre_ranked: &[usize], k: usize, popularity: &[u64]) -> Result<Vec<usize>, EvalError> {
    if pre_ranked.len() < k {
        return Err(EvalError::Input(format!("pre-ranked list of {} is shorter than k={k}", pre_ranked.len())));
    }
    if let Some(&bad) = pre_ranked.iter().find(|&&i| i >= popularity.len()) {
        return Err(EvalError::Input(format!("item {bad} has no popularity")));
    }
    let mut out = pre_ranked.to_vec();
    out.sort_by_key(|&i| popularity[i]);
    out.truncate(k);
    Ok(out)
}

/// Two-key score `primary · (max_pop + 1) + pop`, exact in `f64` for any
/// realistic count.
fn lexical(primary: u64, pop: u64, max_pop: u64) -> f64 {
    (primary as f64) * (max_pop as f64 + 1.0) + pop as f64
}

fn check(candidates: &[usize], n: usize) -> Result<(), EvalError> {
    match candidates.iter().find(|&&i| i >= n) {
        Some(bad) => Err(EvalError::Input(format!("candidate {bad} outside catalog of {n}"))),
        None => Ok(()),
    }
}

pub struct PopScorer {
    pub popularity: Vec<u64>,
}

impl Scorer for PopScorer {
    fn score(&self, _history: &[usize], candidates: &[usize]) -> Result<Vec<f64>, EvalError> {
        check(candidates, self.popularity.len())?;
        Ok(candidates.iter().map(|&i| self.popularity[i] as f64).collect())
    }
}

pub struct SpopScorer {
    pub popularity: Vec<u64>,
}

impl Scorer for SpopScorer {
    fn score(&self, history: &[usize], candidates: &[usize]) -> Result<Vec<f64>, EvalError> {
        check(candidates, self.popularity.len())?;
        let max = self.popularity.iter().copied().max().unwrap_or(0);
        let c = counts_in(history, self.popularity.len());
        Ok(candidates.iter().map(|&i| lexical(c[i], self.popularity[i], max)).collect())
    }
}

pub struct FomcScorer {
    pub popularity: Vec<u64>,
    pub transitions: Transitions,
}

impl Scorer for FomcScorer {
    fn score(&self, history: &[usize], candidates: &[usize]) -> Result<Vec<f64>, EvalError> {
        check(candidates, self.popularity.len())?;
        let max = self.popularity.iter().copied().max().unwrap_or(0);
        Ok(candidates
            .iter()
            .map(|&i| {
                let t = history.last().map_or(0, |&l| self.transitions.count(l, i));
                lexical(t, self.popularity[i], max)
            })
            .collect())
    }
}

/// Re-ranks the base model's top `5k` candidates from least to most
/// popular; the remaining candidates follow in base order.
pub struct RerankScorer<'a> {
    pub base: &'a dyn Scorer,
    pub popularity: Vec<u64>,
    pub k: usize,
}

impl Scorer for RerankScorer<'_> {
    fn score(&self, history: &[usize], candidates: &[usize]) -> Result<Vec<f64>, EvalError> {
        check(candidates, self.popularity.len())?;
        let s = self.base.score(history, candidates)?;
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(candidates[a].cmp(&candidates[b])));
        let cut = (5 * self.k).min(order.len());
        // stable: equal popularity keeps the base order
        order[..cut].sort_by_key(|&p| self.popularity[candidates[p]]);
        let mut pos_of = vec![0usize; candidates.len()];
        for (rank, &p) in order.iter().enumerate() {
            pos_of[p] = rank;
        }
        let n = candidates.len() as f64;
        Ok(pos_of.iter().map(|&r| n - r as f64).collect())
    }
}
