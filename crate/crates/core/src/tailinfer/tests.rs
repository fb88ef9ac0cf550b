use proptest::prelude::*;

use super::*;
use crate::dataset::{build_sequences, split_leave_one_out, LeaveOneOutSplit};
use crate::synthetic::{generate, SyntheticConfig};

fn tiny(variant: Variant, n_items: usize, seed: u64) -> RecModel {
    let mut cfg = ModelConfig::new(variant, 8, 10);
    cfg.dropout = 0.0;
    cfg.blocks = 1;
    cfg.heads = 2;
    let mut m = RecModel::new(cfg, n_items, seed).unwrap();
    // larger embeddings than the init scale, so targets are not near zero
    let mut r = rng::derive(seed, &[42]);
    let table = m.params.value_mut("emb.items").unwrap();
    for v in table.data_mut()[..n_items * 8].iter_mut() {
        *v = rand::Rng::gen_range(&mut r, -1.0..1.0);
    }
    m
}

fn small_cfg() -> InferenceConfig {
    InferenceConfig { agg_heads: 2, epochs: 3, batch_size: 8, ..Default::default() }
}

fn corpus() -> (Catalog, LeaveOneOutSplit) {
    let c = generate(&SyntheticConfig { users: 120, items: 60, ..Default::default() }).unwrap();
    let (mut cat, seqs) = build_sequences(&c.interactions, 5).unwrap();
    let split = split_leave_one_out(&mut cat, &seqs).unwrap();
    (cat, split)
}

fn sets_for(model: &RecModel, split: &LeaveOneOutSplit) -> BTreeMap<usize, ContextSet> {
    let (l, r) = window_sizes(model.config());
    let all: Vec<usize> = (0..model.n_items()).collect();
    crate::dataset::extract_context_sets(split, &all, l, r)
}

#[test]
fn window_sizes_follow_the_encoder() {
    assert_eq!(window_sizes(&ModelConfig::new(Variant::Transformer, 8, 50)), (24, 24));
    assert_eq!(window_sizes(&ModelConfig::new(Variant::Gru, 8, 50)), (49, 0));
    assert_eq!(window_sizes(&ModelConfig::new(Variant::Transformer, 8, 2)), (0, 0));
}

#[test]
fn transformer_window_reuses_the_encoder_state_at_the_masked_slot() {
    let m = tiny(Variant::Transformer, 20, 1);
    let f = InferenceFunction::init(&m, &small_cfg()).unwrap();
    let w = ContextWindow::detached(vec![3, 7, 1], 9, vec![4, 4]);
    let got = f.interpret(&m, &w).unwrap();
    let tokens = [Token::Item(3), Token::Item(7), Token::Item(1), Token::Mask, Token::Item(4), Token::Item(4)];
    let mut tape = Tape::new();
    let mut r = rng::derive(0, &[]);
    let (_, h) = encoder_hidden(
        &mut tape,
        &m.params,
        m.config(),
        m.n_items(),
        &tokens,
        m.config().total_len(),
        &mut Pass { training: false, rng: &mut r },
    )
    .unwrap();
    assert_eq!(got, tape.value(h).row_slice(3).to_vec());
}

#[test]
fn gru_window_of_one_item_is_a_single_step_from_zero() {
    let m = tiny(Variant::Gru, 20, 2);
    let f = InferenceFunction::init(&m, &small_cfg()).unwrap();
    let got = f.interpret(&m, &ContextWindow::detached(vec![5], 9, vec![])).unwrap();
    // hand GRU cell from h = 0
    let p = |n: &str| m.params.value(n).unwrap().data().to_vec();
    let d = 8;
    let (wx, bx) = (p("enc.gru.wx"), p("enc.gru.bx"));
    let mut lt = Tape::new();
    let x_var = lt.constant(Tensor::row(m.item_embedding(5).unwrap().to_vec()));
    let g = lt.constant(m.params.value("emb.ln.gain").unwrap().clone());
    let b = lt.constant(m.params.value("emb.ln.bias").unwrap().clone());
    let xn = lt.layer_norm(x_var, g, b, m.config().ln_eps).unwrap();
    let x = lt.value(xn).data().to_vec();
    let pre = |j: usize| bx[j] + (0..d).map(|i| x[i] * wx[i * 3 * d + j]).sum::<f64>();
    let want: Vec<f64> = (0..d)
        .map(|j| {
            kernels::sigmoid(pre(j)) * pre(2 * d + j).tanh()
        })
        .collect();
    // h' = h + z⊙(h̃ − h) with every recurrent term zero
    for (a, e) in got.iter().zip(&want) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
    assert_eq!(got, m.user_state(&[5]).unwrap());
}

#[test]
fn pad_slots_do_not_influence_the_representation() {
    let mut m = tiny(Variant::Transformer, 20, 3);
    let f = InferenceFunction::init(&m, &small_cfg()).unwrap();
    let short = ContextWindow::detached(vec![2], 9, vec![6]);
    let before = f.interpret(&m, &short).unwrap();
    // three tokens occupy the last three of eleven slots; scramble the rest
    let pos = m.params.value_mut("emb.pos").unwrap();
    for s in 0..8 {
        pos.row_slice_mut(s).iter_mut().for_each(|v| *v = 7.0 - *v);
    }
    assert_eq!(before, f.interpret(&m, &short).unwrap());
    // a detached copy at another sequence position carries the same tokens
    let moved = ContextWindow { user: 3, target_position: 17, ..short.clone() };
    assert_eq!(before, f.interpret(&m, &moved).unwrap());
}

#[test]
fn windows_without_context_are_rejected() {
    let t = tiny(Variant::Transformer, 10, 4);
    let f = InferenceFunction::init(&t, &small_cfg()).unwrap();
    assert!(matches!(f.interpret(&t, &ContextWindow::detached(vec![], 1, vec![])), Err(InferError::Context(_))));
    let g = tiny(Variant::Gru, 10, 4);
    let f = InferenceFunction::init(&g, &small_cfg()).unwrap();
    // right context is invisible to the recurrent interpreter
    assert!(matches!(f.interpret(&g, &ContextWindow::detached(vec![], 1, vec![2])), Err(InferError::Context(_))));
    assert!(f.aggregate(&[]).is_err());
}

#[test]
fn duplicated_vectors_aggregate_identically() {
    let m = tiny(Variant::Transformer, 10, 5);
    let f = InferenceFunction::init(&m, &small_cfg()).unwrap();
    let v: Vec<f64> = (0..8).map(|j| (j as f64 * 0.37).sin()).collect();
    let one = f.aggregate(&[v.clone()]).unwrap();
    assert_eq!(one, f.aggregate(&[v.clone()]).unwrap());
    for k in [5, 10] {
        let many = f.aggregate(&vec![v.clone(); k]).unwrap();
        for (a, b) in one.iter().zip(&many) {
            assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn aggregation_ignores_order(rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 8), 1..7), seed in 0u64..1000) {
        let m = tiny(Variant::Gru, 10, 6);
        let f = InferenceFunction::init(&m, &small_cfg()).unwrap();
        let mut shuffled = rows.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng::derive(seed, &[]));
        let a = f.aggregate(&rows).unwrap();
        let b = f.aggregate(&shuffled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_epochs_return_the_initialization() {
    let (_, split) = corpus();
    let m = tiny(Variant::Gru, split_items(&split), 7);
    let sets = sets_for(&m, &split);
    let cfg = InferenceConfig { epochs: 0, ..small_cfg() };
    let (f, rep) = train_inference_function(&m, &sets, &[0, 1, 2], &cfg).unwrap();
    assert_eq!(f, InferenceFunction::init(&m, &cfg).unwrap());
    assert!(rep.curve.is_empty());
}

fn split_items(split: &LeaveOneOutSplit) -> usize {
    split.users.iter().flat_map(|u| u.full_sequence()).max().unwrap() + 1
}

#[test]
fn a_single_item_with_one_context_is_fitted_closely() {
    let m = tiny(Variant::Transformer, 12, 8);
    let w = ContextWindow::detached(vec![1, 2, 3], 5, vec![4]);
    let sets = BTreeMap::from([(5, ContextSet { target: 5, windows: vec![w.clone()] })]);
    let cfg = InferenceConfig {
        epochs: 500,
        batch_size: 1,
        learning_rate: 1e-2,
        warmup_steps: 0,
        ..small_cfg()
    };
    let (f, rep) = train_inference_function(&m, &sets, &[5], &cfg).unwrap();
    let e = f.infer(&m, &[w]).unwrap();
    let dist: f64 = e.iter().zip(m.item_embedding(5).unwrap()).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!(dist < 1e-3, "final squared distance {dist}");
    assert!(rep.curve[0] > 100.0 * dist);
}

#[test]
fn frozen_interpreter_is_bitwise_untouched() {
    let (_, split) = corpus();
    for variant in [Variant::Gru, Variant::Transformer] {
        let m = tiny(variant, split_items(&split), 9);
        let sets = sets_for(&m, &split);
        let targets: Vec<usize> = (0..20).collect();
        let (f, _) = train_inference_function(&m, &sets, &targets, &small_cfg()).unwrap();
        for (_, p) in m.params.subset("enc.").iter() {
            assert_eq!(f.params.value(&p.name).unwrap(), &p.value, "{}", p.name);
        }
        let init = InferenceFunction::init(&m, &small_cfg()).unwrap();
        assert_ne!(f.params.value("agg.out.w").unwrap(), init.params.value("agg.out.w").unwrap());

        let open = InferenceConfig { phi_alpha_frozen: false, ..small_cfg() };
        let (g, _) = train_inference_function(&m, &sets, &targets, &open).unwrap();
        let changed = m.params.subset("enc.").iter().any(|(_, p)| g.params.value(&p.name).unwrap() != &p.value);
        assert!(changed, "{variant:?}: trainable interpreter did not move");
    }
}

#[test]
fn interpreter_initialization_sources() {
    let m = tiny(Variant::Transformer, 10, 10);
    let pre = InferenceFunction::init(&m, &small_cfg()).unwrap();
    let scratch =
        InferenceFunction::init(&m, &InferenceConfig { phi_alpha_init: InterpreterInit::Scratch, ..small_cfg() })
            .unwrap();
    for (_, p) in m.params.subset("enc.").iter() {
        assert_eq!(pre.params.value(&p.name).unwrap(), &p.value);
        assert_eq!(scratch.params.value(&p.name).unwrap().shape(), p.value.shape());
    }
    assert_ne!(scratch.params.value("enc.b0.att.wq").unwrap(), pre.params.value("enc.b0.att.wq").unwrap());
    assert!(pre.params.iter().all(|(_, p)| !p.name.starts_with("emb.")));
}

#[test]
fn ablation_switches_all_run() {
    let (_, split) = corpus();
    let m = tiny(Variant::Transformer, split_items(&split), 11);
    let sets = sets_for(&m, &split);
    let targets: Vec<usize> = (0..15).collect();
    for cfg in [
        InferenceConfig { few_shot: false, ..small_cfg() },
        InferenceConfig { phi_alpha_init: InterpreterInit::Scratch, phi_alpha_frozen: false, ..small_cfg() },
        InferenceConfig { phi_alpha_frozen: false, ..small_cfg() },
        InferenceConfig { target_set: TargetSet::All, ..small_cfg() },
    ] {
        let (_, rep) = train_inference_function(&m, &sets, &targets, &cfg).unwrap();
        assert_eq!(rep.curve.len(), 3);
        assert!(rep.curve.iter().all(|c| c.is_finite()));
    }
}

#[test]
fn contextless_targets_are_skipped_and_all_skipped_fails() {
    let m = tiny(Variant::Gru, 10, 12);
    let only_right = ContextWindow::detached(vec![], 3, vec![1, 2]);
    let ok = ContextWindow::detached(vec![1], 4, vec![]);
    let sets = BTreeMap::from([
        (3, ContextSet { target: 3, windows: vec![only_right] }),
        (4, ContextSet { target: 4, windows: vec![ok] }),
    ]);
    let (_, rep) = train_inference_function(&m, &sets, &[3, 4, 5], &small_cfg()).unwrap();
    assert_eq!(rep.skipped, vec![3, 5]);
    assert_eq!(rep.targets, vec![4]);
    assert!(matches!(train_inference_function(&m, &sets, &[3, 5], &small_cfg()), Err(InferError::Training(_))));
}

#[test]
fn inference_replaces_only_tail_rows_with_context() {
    let m = tiny(Variant::Transformer, 6, 13);
    let f = InferenceFunction::init(&m, &small_cfg()).unwrap();
    let ws: Vec<ContextWindow> = (0..3).map(|k| ContextWindow::detached(vec![k], 4, vec![k + 1])).collect();
    let sets = BTreeMap::from([
        (0, ContextSet { target: 0, windows: vec![ContextWindow::detached(vec![1], 0, vec![])] }),
        (4, ContextSet { target: 4, windows: ws.clone() }),
        (5, ContextSet { target: 5, windows: vec![] }),
    ]);
    let partition = PopularityPartition::from_mask(0.5, vec![false, false, false, true, true, true], 0);
    let out = infer_embeddings(&f, &m, &sets, &partition).unwrap();
    assert_eq!(out.len(), 6);
    for e in &out {
        let original = m.item_embedding(e.item).unwrap();
        match e.item {
            4 => {
                assert_eq!(e.provenance, Provenance::Inferred);
                assert_eq!(e.vector, f.infer(&m, &ws).unwrap());
            }
            _ => {
                assert_eq!(e.provenance, Provenance::Original);
                assert_eq!(e.vector, original);
            }
        }
    }
}

#[test]
fn large_context_sets_are_subsampled_to_the_cap() {
    let cfg = ModelConfig::new(Variant::Transformer, 8, 10);
    let windows: Vec<ContextWindow> = (0..100).map(|k| ContextWindow::detached(vec![k % 7], 3, vec![])).collect();
    let set = ContextSet { target: 3, windows };
    let mut r = rng::derive(1, &[]);
    assert_eq!(capped_windows(&cfg, &set, 64, &mut r).len(), 64);
    assert_eq!(capped_windows(&cfg, &set, 200, &mut r).len(), 100);
}

#[test]
fn applying_touches_only_inferred_rows() {
    let m = tiny(Variant::Gru, 6, 14);
    assert_eq!(apply_embeddings(&m, &[]).unwrap(), m);
    let v = vec![0.5; 8];
    let inferred = [
        InferredEmbedding { item: 1, vector: m.item_embedding(1).unwrap().to_vec(), provenance: Provenance::Original },
        InferredEmbedding { item: 4, vector: v.clone(), provenance: Provenance::Inferred },
    ];
    let after = apply_embeddings(&m, &inferred).unwrap();
    for (id, p) in m.params.iter() {
        let q = after.params.get(id);
        if p.name == "emb.items" {
            for r in 0..p.value.rows() {
                if r == 4 {
                    assert_eq!(q.value.row_slice(r), v.as_slice());
                } else {
                    assert_eq!(q.value.row_slice(r), p.value.row_slice(r));
                }
            }
        } else {
            assert_eq!(q, p, "{}", p.name);
        }
    }
    let state = after.user_state(&[0, 2]).unwrap();
    let s = after.score_items(&state, &[4]).unwrap()[0];
    let bias = after.params.value("emb.bias").unwrap().data()[4];
    assert!((s - (kernels::dot(&state, &v) + bias)).abs() < 1e-12);
    let bad = [InferredEmbedding { item: 2, vector: vec![1.0; 3], provenance: Provenance::Inferred }];
    assert!(apply_embeddings(&m, &bad).is_err());
}

#[test]
fn a_new_item_is_appended_without_training() {
    let (mut cat, split) = corpus();
    let m = tiny(Variant::Transformer, cat.len(), 15);
    let f = InferenceFunction::init(&m, &small_cfg()).unwrap();
    let w = ContextWindow::detached(vec![0, 1], usize::MAX, vec![2]);
    let (e, m2) = infer_new_item(&f, &m, &mut cat, "fresh", &[w.clone()]).unwrap();
    assert_eq!(e.item, m.n_items());
    assert_eq!(cat.index_of("fresh"), Some(e.item));
    assert_eq!(e.vector, f.aggregate(&[f.interpret(&m, &w).unwrap()]).unwrap());
    assert_eq!(m2.item_embedding(e.item).unwrap(), e.vector.as_slice());
    let state = m2.user_state(&split.users[0].train).unwrap();
    assert!(m2.score(&state).unwrap()[e.item].is_finite());
    let mut cat2 = cat.clone();
    assert!(matches!(infer_new_item(&f, &m2, &mut cat2, "other", &[]), Err(InferError::Context(_))));
}

#[test]
fn inference_checkpoint_round_trips() {
    let m = tiny(Variant::Gru, 6, 16);
    let f = InferenceFunction::init(&m, &small_cfg()).unwrap();
    let ck = f.to_checkpoint("cat", 6, "src");
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back.source_hash.as_deref(), Some("src"));
    assert_eq!(InferenceFunction::from_checkpoint(back).unwrap(), f);
    let rec = Checkpoint::from_model(&m, "cat");
    assert!(InferenceFunction::from_checkpoint(rec).is_err());
}

#[test]
fn config_validation() {
    assert!(InferenceConfig { kappa_max: 0, ..Default::default() }.validate(8).is_err());
    assert!(InferenceConfig { agg_heads: 3, ..Default::default() }.validate(8).is_err());
    assert!(InferenceConfig { agg_dropout: 1.0, ..Default::default() }.validate(8).is_err());
    assert!(InferenceConfig::default().validate(32).is_ok());
}

#[test]
fn nearest_head_distance_matches_brute_force() {
    let m = tiny(Variant::Gru, 6, 17);
    let partition = PopularityPartition::from_mask(0.5, vec![false, false, false, true, true, true], 0);
    let got = mean_nearest_head_distance(&m, &[3, 5], &partition);
    let e = |i: usize| m.item_embedding(i).unwrap().to_vec();
    let nn = |t: usize| {
        (0..3)
            .map(|h| e(h).iter().zip(e(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    assert!((got - (nn(3) + nn(5)) / 2.0).abs() < 1e-12);
}

fn reproduction_loss(full: &ParamSet, f: &InferenceFunction, m: &RecModel, ws: &[ContextWindow], target: usize) -> f64 {
    let (tape, l) = reproduction_tape(full, f, m, ws, target);
    tape.value(l).item()
}

fn reproduction_tape(
    full: &ParamSet,
    f: &InferenceFunction,
    m: &RecModel,
    ws: &[ContextWindow],
    target: usize,
) -> (Tape, Var) {
    let mut tape = Tape::new();
    let rows: Vec<Var> =
        ws.iter().map(|w| interpret_var(&mut tape, full, &f.model_config, m.n_items(), w).unwrap()).collect();
    let x = tape.concat_rows(&rows).unwrap();
    let mut r = rng::derive(0, &[]);
    let out = aggregate_var(&mut tape, full, &f.config, x, &mut Pass { training: false, rng: &mut r }).unwrap();
    let e = tape.constant(Tensor::row(m.item_embedding(target).unwrap().to_vec()));
    let l = tape.sq_dist(out, e).unwrap();
    (tape, l)
}

#[test]
fn reproduction_gradients_match_finite_differences() {
    for variant in [Variant::Transformer, Variant::Gru] {
        let m = tiny(variant, 10, 19);
        let cfg = InferenceConfig { phi_alpha_frozen: false, ..small_cfg() };
        let mut f = InferenceFunction::init(&m, &cfg).unwrap();
        // move the aggregator away from its near-zero init
        let mut r = rng::derive(19, &[1]);
        let ids: Vec<_> = f.params.iter().filter(|(_, p)| p.name.starts_with("agg.")).map(|(id, _)| id).collect();
        for id in ids {
            for v in f.params.get_mut(id).value.data_mut() {
                *v += rand::Rng::gen_range(&mut r, -0.3..0.3);
            }
        }
        let full = f.joined(&m).unwrap();
        let ws = [ContextWindow::detached(vec![1, 2], 5, vec![3]), ContextWindow::detached(vec![4], 5, vec![6, 7])];
        let (tape, l) = reproduction_tape(&full, &f, &m, &ws, 5);
        let g = tape.backward(l, &full).unwrap();
        let h = 1e-5;
        for (id, p) in full.iter() {
            if !p.trainable {
                assert!(g.get(id).is_none(), "{} must not receive a gradient", p.name);
                continue;
            }
            let grad = g.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.len()]);
            for k in (0..p.value.len()).step_by(5) {
                let mut q = full.clone();
                q.get_mut(id).value.data_mut()[k] += h;
                let up = reproduction_loss(&q, &f, &m, &ws, 5);
                q.get_mut(id).value.data_mut()[k] -= 2.0 * h;
                let down = reproduction_loss(&q, &f, &m, &ws, 5);
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{variant:?} {}[{k}]: {fd} vs {}",
                    p.name,
                    grad[k]
                );
            }
        }
    }
}
