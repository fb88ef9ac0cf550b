use rand::Rng as _;

use crate::dataset::LeaveOneOutSplit;
use crate::model::Token;
use crate::rng::Rng;

/// Encoder input plus `(row, true item)` pairs. For masked examples the row
/// holds `[mask]`; for next-item examples the state at the row predicts the
/// item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub input: Vec<Token>,
    pub targets: Vec<(usize, usize)>,
}

/// Windows over a training prefix, taken backwards from its end with the
/// given stride; each holds at most `max_len` items.
pub fn windows(seq: &[usize], max_len: usize, stride: usize) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut end = seq.len();
    while end > 0 {
        out.push(&seq[end.saturating_sub(max_len)..end]);
        if end <= max_len {
            break;
        }
        end = end.saturating_sub(stride.max(1));
    }
    out
}

/// Cloze examples: every position is masked independently with
/// `probability`; an example with no mask is redrawn.
pub fn make_masked_examples(
    split: &LeaveOneOutSplit,
    max_len: usize,
    stride: usize,
    probability: f64,
    rng: &mut Rng,
) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for seq in split.train_sequences() {
        for w in windows(seq, max_len, stride) {
            out.push(mask_window(w, probability, rng));
        }
    }
    out
}

pub fn mask_window(window: &[usize], probability: f64, rng: &mut Rng) -> TrainingExample {
    loop {
        let mut input = Vec::with_capacity(window.len());
        let mut targets = Vec::new();
        for (p, &item) in window.iter().enumerate() {
            if rng.gen::<f64>() < probability {
                input.push(Token::Mask);
                targets.push((p, item));
            } else {
                input.push(Token::Item(item));
            }
        }
        if !targets.is_empty() {
            return TrainingExample { input, targets };
        }
    }
}

/// One example per position `t ≥ 1` of each training prefix: the (at most
/// `max_len`) items before `t` predict the item at `t`.
pub fn make_next_item_examples(split: &LeaveOneOutSplit, max_len: usize) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for seq in split.train_sequences() {
        for t in 1..seq.len() {
            let input: Vec<Token> = seq[t.saturating_sub(max_len)..t].iter().map(|&i| Token::Item(i)).collect();
            let row = input.len() - 1;
            out.push(TrainingExample { input, targets: vec![(row, seq[t])] });
        }
    }
    out
}

/// The next-item examples grouped so one recurrent pass serves many
/// targets. The state after row `r` of a packed input equals the state of
/// the corresponding single example, so the loss is unchanged.
pub fn pack_next_item_examples(split: &LeaveOneOutSplit, max_len: usize) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for seq in split.train_sequences() {
        if seq.len() < 2 {
            continue;
        }
        // targets 1..=max_len see a full prefix from the sequence start
        let head_end = seq.len().min(max_len + 1);
        out.push(TrainingExample {
            input: seq[..head_end - 1].iter().map(|&i| Token::Item(i)).collect(),
            targets: (1..head_end).map(|t| (t - 1, seq[t])).collect(),
        });
        // later targets need exactly the last max_len items
        for t in head_end..seq.len() {
            out.push(TrainingExample {
                input: seq[t - max_len..t].iter().map(|&i| Token::Item(i)).collect(),
                targets: vec![(max_len - 1, seq[t])],
            });
        }
    }
    out
}
