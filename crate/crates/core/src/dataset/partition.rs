use serde::{Deserialize, Serialize};

use super::DataError;

/// Head/tail split of the catalog by training popularity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopularityPartition {
    pub tau: f64,
    is_tail: Vec<bool>,
    /// Highest training count among tail items.
    pub threshold_count: u64,
}

impl PopularityPartition {
    /// A partition with every item in the head group.
    pub fn all_head(n_items: usize) -> Self {
        Self { tau: 0.0, is_tail: vec![false; n_items], threshold_count: 0 }
    }

    pub fn from_mask(tau: f64, is_tail: Vec<bool>, threshold_count: u64) -> Self {
        Self { tau, is_tail, threshold_count }
    }

    pub fn is_tail(&self, item: usize) -> bool {
        self.is_tail.get(item).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.is_tail.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_tail.is_empty()
    }

    pub fn head_items(&self) -> Vec<usize> {
        (0..self.is_tail.len()).filter(|&i| !self.is_tail[i]).collect()
    }

    pub fn tail_items(&self) -> Vec<usize> {
        (0..self.is_tail.len()).filter(|&i| self.is_tail[i]).collect()
    }

    /// Treat items appended after partitioning as tail.
    pub fn extend_tail(&mut self, n_items: usize) {
        self.is_tail.resize(n_items, true);
    }
}

/// Order items by popularity descending (ties: ascending index) and put the
/// last `⌈tau·n⌉` into the tail.
pub fn partition_head_tail(popularity: &[u64], tau: f64) -> Result<PopularityPartition, DataError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(DataError::Parameter(format!("tau {tau} outside (0, 1)")));
    }
    let n = popularity.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| popularity[b].cmp(&popularity[a]).then(a.cmp(&b)));
    // guard against tau·n landing a hair above an integer
    let n_tail = ((tau * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut is_tail = vec![false; n];
    for &i in &order[n - n_tail.min(n)..] {
        is_tail[i] = true;
    }
    let threshold_count = order[n - n_tail.min(n)..].iter().map(|&i| popularity[i]).max().unwrap_or(0);
    Ok(PopularityPartition { tau, is_tail, threshold_count })
}
