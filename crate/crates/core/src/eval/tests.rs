use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{
    build_sequences, split_leave_one_out, NegativePopularity, NegativeSampler, PopularityPartition, UserSplit,
};
use crate::synthetic::{generate, SyntheticConfig};

struct FnScorer<F>(F);

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&[usize], &[usize]) -> Vec<f64> + Sync,
{
    fn score(&self, h: &[usize], c: &[usize]) -> Result<Vec<f64>, EvalError> {
        Ok((self.0)(h, c))
    }
}

fn brute_rank(scores: &[f64], cands: &[usize]) -> usize {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(cands[a].cmp(&cands[b])));
    order.iter().position(|&p| p == 0).unwrap() + 1
}

fn random_cases(n: usize, n_items: usize, seed: u64) -> Vec<EvalCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|u| {
            let mut items: Vec<usize> = (0..n_items).collect();
            for i in 0..101 {
                let j = rng.gen_range(i..n_items);
                items.swap(i, j);
            }
            EvalCase { user: u, history: vec![items[101]], candidates: items[..101].to_vec() }
        })
        .collect()
}

#[test]
fn hit_ratio_and_reciprocal_rank_examples() {
    assert_eq!(hit_ratio(1, 5), 1.0);
    assert_eq!(hit_ratio(7, 5), 0.0);
    assert_eq!(hit_ratio(7, 10), 1.0);
    assert_eq!(reciprocal_rank(1), 1.0);
    assert_eq!(reciprocal_rank(4), 0.25);
    let mean = [1, 2, 4].iter().map(|&r| reciprocal_rank(r)).sum::<f64>() / 3.0;
    assert!((mean - 7.0 / 12.0).abs() < 1e-12);
}

#[test]
fn metrics_match_brute_force_on_random_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = random_cases(1000, 300, 2);
    // coarse scores so ties occur often
    let scores: Vec<Vec<f64>> =
        cases.iter().map(|c| c.candidates.iter().map(|_| rng.gen_range(0..20) as f64).collect()).collect();
    let ranks: Vec<usize> = cases.iter().zip(&scores).map(|(c, s)| rank_of_truth(s, &c.candidates)).collect();
    for ((c, s), &r) in cases.iter().zip(&scores).zip(&ranks) {
        assert_eq!(r, brute_rank(s, &c.candidates));
    }
    let partition = PopularityPartition::all_head(300);
    let (report, _) = summarize(&cases, &ranks, &partition);
    let brute: Vec<usize> = cases.iter().zip(&scores).map(|(c, s)| brute_rank(s, &c.candidates)).collect();
    let count = |k: usize| brute.iter().filter(|&&r| r <= k).count() as f64 / 1000.0;
    assert_eq!(report.all.hr5, count(5));
    assert_eq!(report.all.hr10, count(10));
    let mrr = brute.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / 1000.0;
    assert_eq!(report.all.mrr, mrr);
    assert_eq!(report.all.support, 1000);
}

#[test]
fn perfect_and_adversarial_models() {
    let cases = random_cases(50, 200, 3);
    let mut mask = vec![false; 200];
    mask[..100].fill(true);
    let partition = PopularityPartition::from_mask(0.5, mask, 0);
    let perfect = FnScorer(|_: &[usize], c: &[usize]| (0..c.len()).map(|p| f64::from(p == 0)).collect());
    let (r, _) = evaluate(&perfect, &cases, &partition).unwrap();
    for g in [r.head, r.tail, r.all] {
        assert_eq!((g.hr5, g.hr10, g.mrr), (1.0, 1.0, 1.0));
    }
    assert_eq!(r.head.support + r.tail.support, r.all.support);
    let adversarial = FnScorer(|_: &[usize], c: &[usize]| (0..c.len()).map(|p| -f64::from(p == 0)).collect());
    let (r, _) = evaluate(&adversarial, &cases, &partition).unwrap();
    assert_eq!(r.all.hr10, 0.0);
    assert!((r.all.mrr - 1.0 / 101.0).abs() < 1e-15);
}

#[test]
fn uniform_random_scores_hit_the_analytic_expectation() {
    let cases = random_cases(1000, 400, 4);
    let rng = std::sync::Mutex::new(ChaCha8Rng::seed_from_u64(5));
    let scores: Vec<Vec<f64>> =
        cases.iter().map(|c| c.candidates.iter().map(|_| rng.lock().unwrap().gen::<f64>()).collect()).collect();
    let ranks: Vec<usize> = cases.iter().zip(&scores).map(|(c, s)| rank_of_truth(s, &c.candidates)).collect();
    let (r, _) = summarize(&cases, &ranks, &PopularityPartition::all_head(400));
    let expected_mrr = (1..=101).map(|i| 1.0 / i as f64).sum::<f64>() / 101.0;
    assert!((expected_mrr - 0.0514).abs() < 1e-4);
    assert!((r.all.hr10 - 10.0 / 101.0).abs() < 0.03, "{}", r.all.hr10);
    assert!((r.all.mrr - expected_mrr).abs() < 0.01, "{}", r.all.mrr);
}

#[test]
fn head_with_tail_slice_counts_head_truths_with_tail_history() {
    let cases = vec![
        EvalCase { user: 0, history: vec![3], candidates: vec![0, 1] },
        EvalCase { user: 1, history: vec![1], candidates: vec![0, 2] },
        EvalCase { user: 2, history: vec![3], candidates: vec![2, 0] },
    ];
    let partition = PopularityPartition::from_mask(0.5, vec![false, false, true, true], 0);
    let (r, ranks) = summarize(&cases, &[1, 1, 20], &partition);
    assert_eq!(r.slice_head_with_tail.support, 1);
    assert_eq!(r.tail.support, 1);
    assert_eq!(r.head.support, 2);
    assert!(ranks[2].tail);
}

#[test]
fn pop_examples() {
    // a:3, b:1, c:2
    assert_eq!(pop_rank(&[3, 1, 2]), vec![0, 2, 1]);
    assert_eq!(pop_rank(&[0, 0, 0, 0]), vec![0, 1, 2, 3]);
}

#[test]
fn spop_examples() {
    // a=0, b=1, c=2; globals b > c > a
    let pop = [1, 9, 5, 0, 0];
    assert_eq!(&spop_rank(&[0, 0, 1], &pop)[..3], &[0, 1, 2]);
    // distinct items in the sequence: pure popularity order among them
    assert_eq!(&spop_rank(&[0, 2, 1], &pop)[..3], &[1, 2, 0]);
}

#[test]
fn fomc_examples() {
    let mut t = Transitions::default();
    t.add(0, 1);
    t.add(0, 1);
    t.add(0, 2);
    let pop = [4, 1, 2, 3, 0];
    assert_eq!(&fomc_rank(0, &t, &pop)[..2], &[1, 2]);
    assert_eq!(fomc_rank(4, &t, &pop), pop_rank(&pop));
}

#[test]
fn rerank_examples() {
    // x:9, y:1, z:5
    let pop = [9, 1, 5];
    assert_eq!(rerank_by_popularity(&[0, 1, 2], 1, &pop).unwrap(), vec![1]);
    assert_eq!(rerank_by_popularity(&[2, 0, 1], 3, &[4, 4, 4]).unwrap(), vec![2, 0, 1]);
    assert!(rerank_by_popularity(&[0], 2, &pop).is_err());
}

#[test]
fn baseline_scorers_agree_with_rankers() {
    let pop = vec![3, 7, 7, 0, 2, 5];
    let mut t = Transitions::default();
    t.add(4, 3);
    t.add(4, 0);
    t.add(4, 3);
    let hist = vec![2, 5, 5, 4];
    let cands: Vec<usize> = (0..6).collect();
    let order_of = |s: Vec<f64>| {
        let mut o = cands.clone();
        o.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        o
    };
    let pop_s = PopScorer { popularity: pop.clone() };
    assert_eq!(order_of(pop_s.score(&hist, &cands).unwrap()), pop_rank(&pop));
    let sp = SpopScorer { popularity: pop.clone() };
    assert_eq!(order_of(sp.score(&hist, &cands).unwrap()), spop_rank(&hist, &pop));
    let fm = FomcScorer { popularity: pop.clone(), transitions: t.clone() };
    assert_eq!(order_of(fm.score(&hist, &cands).unwrap()), fomc_rank(4, &t, &pop));
    // re-ranking the popularity base with k=1 over 5 of 6 candidates
    let rr = RerankScorer { base: &pop_s, popularity: pop.clone(), k: 1 };
    let got = order_of(rr.score(&hist, &cands).unwrap());
    assert_eq!(got, vec![4, 0, 5, 1, 2, 3]);
}

#[test]
fn transition_counts_match_pair_scan() {
    let corpus = generate(&SyntheticConfig { users: 200, ..Default::default() }).unwrap();
    let (mut cat, seqs) = build_sequences(&corpus.interactions, 5).unwrap();
    let split = split_leave_one_out(&mut cat, &seqs).unwrap();
    let t = Transitions::from_split(&split);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..300 {
        let (a, b) = (rng.gen_range(0..cat.len()), rng.gen_range(0..cat.len()));
        let brute: u64 = split
            .users
            .iter()
            .map(|u| (0..u.train.len().saturating_sub(1)).filter(|&p| u.train[p] == a && u.train[p + 1] == b).count() as u64)
            .sum();
        assert_eq!(t.count(a, b), brute);
    }
}

#[test]
fn cases_are_seeded_and_exclude_the_user_history() {
    let corpus = generate(&SyntheticConfig { users: 150, ..Default::default() }).unwrap();
    let (mut cat, seqs) = build_sequences(&corpus.interactions, 5).unwrap();
    let split = split_leave_one_out(&mut cat, &seqs).unwrap();
    let sampler = NegativeSampler::new(&cat, &split, NegativePopularity::Global);
    let a = build_cases(&split, &sampler, 100, 50, Target::Test, 9).unwrap();
    assert_eq!(a, build_cases(&split, &sampler, 100, 50, Target::Test, 9).unwrap());
    assert_ne!(a, build_cases(&split, &sampler, 100, 50, Target::Test, 10).unwrap());
    for (c, u) in a.iter().zip(&split.users) {
        assert_eq!(c.candidates.len(), 101);
        assert_eq!(c.truth(), u.test);
        let full = u.full_sequence();
        assert!(c.candidates[1..].iter().all(|i| !full.contains(i)));
    }
    let v = build_cases(&split, &sampler, 100, 3, Target::Valid, 9).unwrap();
    let u0: &UserSplit = &split.users[0];
    assert_eq!(v[0].truth(), u0.valid);
    assert_eq!(v[0].history, u0.train[u0.train.len().saturating_sub(3)..].to_vec());
}

proptest! {
    #[test]
    fn ranking_ignores_monotone_transforms(scores in prop::collection::vec(-5.0f64..5.0, 101), a in 0.1f64..10.0, b in -3.0f64..3.0) {
        let cands: Vec<usize> = (0..101).rev().collect();
        let transformed: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        prop_assert_eq!(rank_of_truth(&scores, &cands), rank_of_truth(&transformed, &cands));
    }
}
