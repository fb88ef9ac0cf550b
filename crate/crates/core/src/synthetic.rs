//! Synthetic long-tail interaction logs with planted first-order dynamics.
//!
//! Items get a random Zipf popularity rank and a cluster. Each user starts
//! from a global Zipf draw; every following item is, with probability
//! `follow_prob`, drawn from the next cluster (Zipf-weighted within it) and
//! otherwise from the global Zipf distribution.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataError, Interaction};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub zipf_s: f64,
    pub clusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub follow_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items: 500,
            zipf_s: 1.2,
            clusters: 20,
            min_len: 6,
            max_len: 16,
            follow_prob: 0.85,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub interactions: Vec<Interaction>,
    /// Zipf rank (0 = most popular) by synthetic item number.
    pub rank: Vec<usize>,
    pub cluster: Vec<usize>,
}

pub fn item_name(k: usize) -> String {
    format!("i{k}")
}

pub fn user_name(k: usize) -> String {
    format!("u{k}")
}

impl SyntheticCorpus {
    /// Cluster of an item given its identifier.
    pub fn cluster_of(&self, item: &str) -> Option<usize> {
        item.strip_prefix('i').and_then(|s| s.parse::<usize>().ok()).and_then(|k| self.cluster.get(k).copied())
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus, DataError> {
    let bad = |m: &str| Err(DataError::Parameter(m.to_string()));
    if cfg.items == 0 || cfg.users == 0 {
        return bad("users and items must be positive");
    }
    if cfg.clusters == 0 || cfg.clusters > cfg.items {
        return bad("clusters must lie in 1..=items");
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return bad("need 0 < min_len <= max_len");
    }
    if !(0.0..=1.0).contains(&cfg.follow_prob) || !(cfg.zipf_s > 0.0) {
        return bad("follow_prob must lie in [0, 1] and zipf_s be positive");
    }
    let mut r = rng::derive(cfg.seed, &[rng::stream::SYNTH]);
    let mut rank: Vec<usize> = (0..cfg.items).collect();
    rank.shuffle(&mut r);
    let mut cluster: Vec<usize> = (0..cfg.items).map(|k| k % cfg.clusters).collect();
    cluster.shuffle(&mut r);
    let weight: Vec<f64> = rank.iter().map(|&k| 1.0 / ((k + 1) as f64).powf(cfg.zipf_s)).collect();
    let global = WeightedIndex::new(&weight).expect("positive weights");
    let members: Vec<Vec<usize>> =
        (0..cfg.clusters).map(|c| (0..cfg.items).filter(|&k| cluster[k] == c).collect()).collect();
    let within: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&k| weight[k])).expect("nonempty cluster"))
        .collect();

    let mut interactions = Vec::new();
    for u in 0..cfg.users {
        let len = r.gen_range(cfg.min_len..=cfg.max_len);
        let mut cur = global.sample(&mut r);
        for t in 0..len {
            if t > 0 {
                cur = if r.gen::<f64>() < cfg.follow_prob {
                    let c = (cluster[cur] + 1) % cfg.clusters;
                    members[c][within[c].sample(&mut r)]
                } else {
                    global.sample(&mut r)
                };
            }
            interactions.push(Interaction {
                user: user_name(u),
                item: item_name(cur),
                timestamp: 1_000_000 + (u as u64) * 1_000 + t as u64,
            });
        }
    }
    Ok(SyntheticCorpus { interactions, rank, cluster })
}
