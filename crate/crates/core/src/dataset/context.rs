use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LeaveOneOutSplit;

/// Items around one occurrence of a target in a user's training sequence.
/// `left` and `right` are truncated at the sequence boundaries; padding is
/// added only when a window is encoded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub left: Vec<usize>,
    pub target: usize,
    pub right: Vec<usize>,
    /// Source user (index into the split) and occurrence position.
    pub user: usize,
    pub target_position: usize,
}

impl ContextWindow {
    /// A window not tied to a stored sequence (e.g. for a new item).
    pub fn detached(left: Vec<usize>, target: usize, right: Vec<usize>) -> Self {
        Self { left, target, right, user: usize::MAX, target_position: usize::MAX }
    }

    /// Number of context items, target excluded.
    pub fn context_len(&self) -> usize {
        self.left.len() + self.right.len()
    }

    /// The contiguous slice as stored in the source sequence.
    pub fn items(&self) -> Vec<usize> {
        let mut v = self.left.clone();
        v.push(self.target);
        v.extend_from_slice(&self.right);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSet {
    pub target: usize,
    pub windows: Vec<ContextWindow>,
}

impl ContextSet {
    pub fn k(&self) -> usize {
        self.windows.len()
    }
}

/// One window per occurrence of each requested item in any training
/// sequence. Items that never occur map to an empty set.
pub fn extract_context_sets(
    split: &LeaveOneOutSplit,
    items: &[usize],
    left: usize,
    right: usize,
) -> BTreeMap<usize, ContextSet> {
    let mut out: BTreeMap<usize, ContextSet> =
        items.iter().map(|&i| (i, ContextSet { target: i, windows: Vec::new() })).collect();
    for (u, user) in split.users.iter().enumerate() {
        let seq = &user.train;
        for (pos, item) in seq.iter().enumerate() {
            if let Some(set) = out.get_mut(item) {
                let lo = pos.saturating_sub(left);
                let hi = (pos + 1 + right).min(seq.len());
                set.windows.push(ContextWindow {
                    left: seq[lo..pos].to_vec(),
                    target: *item,
                    right: seq[pos + 1..hi].to_vec(),
                    user: u,
                    target_position: pos,
                });
            }
        }
    }
    out
}
