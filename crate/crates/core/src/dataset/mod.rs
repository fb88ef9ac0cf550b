//! Interaction logs, per-user sequences, the leave-one-out split, head/tail
//! partitioning, context windows and evaluation negatives.

mod context;
mod ingest;
mod negatives;
mod partition;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use context::{extract_context_sets, ContextSet, ContextWindow};
pub use ingest::{ingest, parse_csv, parse_jsonl, write_csv, Format, IngestReport, Interaction};
pub use negatives::{NegativePopularity, NegativeSampler};
pub use partition::{partition_head_tail, PopularityPartition};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path}{}: {message}", .line.map(|l| format!(":{l}")).unwrap_or_default())]
    Format { path: String, line: Option<usize>, message: String },
    #[error("no user has at least {min_actions} interactions")]
    EmptyDataset { min_actions: usize },
    #[error("sequence of user `{user}` has {len} items; at least 3 are required")]
    TooShort { user: String, len: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("only {eligible} eligible negatives, {requested} requested")]
    Sampling { eligible: usize, requested: usize },
    #[error("unknown item `{0}`")]
    UnknownItem(String),
}

/// Dense item indexing. Real items occupy `[0, len)`; the padding and
/// `[mask]` slots sit right after them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    items: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    /// Counts over training portions only (set by the split).
    pub train_popularity: Vec<u64>,
    /// Counts over every surviving interaction.
    pub full_popularity: Vec<u64>,
}

impl Catalog {
    pub fn new(items: Vec<String>) -> Self {
        let n = items.len();
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { items, index, train_popularity: vec![0; n], full_popularity: vec![0; n] }
    }

    /// Rebuild the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index_of(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn item_of(&self, idx: usize) -> Option<&str> {
        self.items.get(idx).map(String::as_str)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn pad_index(&self) -> usize {
        self.items.len()
    }

    pub fn mask_index(&self) -> usize {
        self.items.len() + 1
    }

    /// Register an item unseen at build time; it starts with zero counts.
    pub fn push_item(&mut self, item: &str) -> Result<usize, DataError> {
        if self.index.contains_key(item) {
            return Err(DataError::Parameter(format!("item `{item}` already in catalog")));
        }
        let idx = self.items.len();
        self.items.push(item.to_string());
        self.index.insert(item.to_string(), idx);
        self.train_popularity.push(0);
        self.full_popularity.push(0);
        Ok(idx)
    }

    /// Hash of the item vocabulary in index order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for it in &self.items {
            h.update((it.len() as u64).to_le_bytes());
            h.update(it.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<usize>,
}

/// Group interactions by user, drop users with fewer than `min_actions`
/// events and order each history by timestamp (stable on ties). Items are
/// indexed in order of first appearance among surviving interactions.
pub fn build_sequences(
    interactions: &[Interaction],
    min_actions: usize,
) -> Result<(Catalog, Vec<UserSequence>), DataError> {
    let mut order: Vec<&str> = Vec::new();
    let mut per_user: HashMap<&str, Vec<(u64, usize)>> = HashMap::new();
    for (pos, x) in interactions.iter().enumerate() {
        let e = per_user.entry(x.user.as_str()).or_insert_with(|| {
            order.push(x.user.as_str());
            Vec::new()
        });
        e.push((x.timestamp, pos));
    }
    let mut items: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let keep: Vec<bool> = interactions.iter().map(|x| per_user[x.user.as_str()].len() >= min_actions).collect();
    for (x, _) in interactions.iter().zip(&keep).filter(|(_, k)| **k) {
        if !index.contains_key(x.item.as_str()) {
            index.insert(x.item.as_str(), items.len());
            items.push(x.item.clone());
        }
    }
    let mut sequences = Vec::new();
    for user in order {
        let mut events = per_user.remove(user).unwrap_or_default();
        if events.len() < min_actions {
            continue;
        }
        events.sort_by_key(|&(ts, _)| ts);
        let seq = events.iter().map(|&(_, pos)| index[interactions[pos].item.as_str()]).collect();
        sequences.push(UserSequence { user: user.to_string(), items: seq });
    }
    if sequences.is_empty() {
        return Err(DataError::EmptyDataset { min_actions });
    }
    let mut catalog = Catalog::new(items);
    for s in &sequences {
        for &i in &s.items {
            catalog.full_popularity[i] += 1;
        }
    }
    Ok((catalog, sequences))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: String,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    /// Items before the test item.
    pub fn history_for_test(&self) -> Vec<usize> {
        let mut h = self.train.clone();
        h.push(self.valid);
        h
    }

    pub fn full_sequence(&self) -> Vec<usize> {
        let mut h = self.history_for_test();
        h.push(self.test);
        h
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveOneOutSplit {
    pub users: Vec<UserSplit>,
}

impl LeaveOneOutSplit {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn train_sequences(&self) -> impl Iterator<Item = &[usize]> {
        self.users.iter().map(|u| u.train.as_slice())
    }
}

/// Hold out the last item for test and the one before for validation;
/// training popularity in `catalog` is recomputed from the train prefixes.
pub fn split_leave_one_out(catalog: &mut Catalog, sequences: &[UserSequence]) -> Result<LeaveOneOutSplit, DataError> {
    let mut users = Vec::with_capacity(sequences.len());
    for s in sequences {
        let n = s.items.len();
        if n < 3 {
            return Err(DataError::TooShort { user: s.user.clone(), len: n });
        }
        users.push(UserSplit {
            user: s.user.clone(),
            train: s.items[..n - 2].to_vec(),
            valid: s.items[n - 2],
            test: s.items[n - 1],
        });
    }
    catalog.train_popularity = vec![0; catalog.len()];
    for u in &users {
        for &i in &u.train {
            catalog.train_popularity[i] += 1;
        }
    }
    Ok(LeaveOneOutSplit { users })
}

/// Corpus statistics in the usual dataset-table layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_actions_per_user: f64,
    pub avg_actions_per_item: f64,
}

pub fn stats(catalog: &Catalog, sequences: &[UserSequence]) -> DatasetStats {
    let actions: usize = sequences.iter().map(|s| s.items.len()).sum();
    DatasetStats {
        users: sequences.len(),
        items: catalog.len(),
        actions,
        avg_actions_per_user: actions as f64 / sequences.len().max(1) as f64,
        avg_actions_per_item: actions as f64 / catalog.len().max(1) as f64,
    }
}
