use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Catalog, DataError, LeaveOneOutSplit};

/// Which counts drive popularity-proportional negative sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativePopularity {
    /// Counts over the whole interaction log.
    #[default]
    Global,
    /// Counts of test items, add-one smoothed so every item stays drawable.
    Test,
}

#[derive(Clone, Debug)]
pub struct NegativeSampler {
    weights: Vec<f64>,
}

impl NegativeSampler {
    pub fn new(catalog: &Catalog, split: &LeaveOneOutSplit, mode: NegativePopularity) -> Self {
        let weights = match mode {
            NegativePopularity::Global => catalog.full_popularity.iter().map(|&c| c as f64).collect(),
            NegativePopularity::Test => {
                let mut w = vec![1.0; catalog.len()];
                for u in &split.users {
                    w[u.test] += 1.0;
                }
                w
            }
        };
        Self { weights }
    }

    pub fn from_weights(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    /// Draw `n` distinct items without replacement, each draw proportional to
    /// weight, skipping `truth` and every item in `interacted`
    /// (Efraimidis–Spirakis keys).
    pub fn sample<R: Rng + ?Sized>(
        &self,
        truth: usize,
        interacted: &[usize],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, DataError> {
        let mut excluded = vec![false; self.weights.len()];
        for &i in interacted.iter().chain(std::iter::once(&truth)) {
            if i < excluded.len() {
                excluded[i] = true;
            }
        }
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(self.weights.len());
        for (i, &w) in self.weights.iter().enumerate() {
            // one draw per item keeps the stream aligned across exclusion sets
            let u: f64 = rng.gen::<f64>();
            if excluded[i] || w <= 0.0 {
                continue;
            }
            keyed.push((u.max(f64::MIN_POSITIVE).ln() / w, i));
        }
        if keyed.len() < n {
            return Err(DataError::Sampling { eligible: keyed.len(), requested: n });
        }
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(keyed.into_iter().take(n).map(|(_, i)| i).collect())
    }
}
