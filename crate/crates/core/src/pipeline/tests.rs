use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::*;
use crate::dataset::write_csv;
use crate::model::{Checkpoint, RecModel, Variant};
use crate::synthetic::{generate, SyntheticConfig};

fn corpus_csv(dir: &Path) -> PathBuf {
    let cfg = SyntheticConfig { users: 150, items: 60, clusters: 6, ..SyntheticConfig::default() };
    let corpus = generate(&cfg).unwrap();
    let p = dir.join("log.csv");
    write_csv(fs::File::create(&p).unwrap(), &corpus.interactions).unwrap();
    p
}

fn small_config(dir: &Path, variant: Variant) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data.path = corpus_csv(dir);
    cfg.out_dir = dir.join("run");
    cfg.model = crate::model::ModelConfig::new(variant, 8, 10);
    cfg.model.heads = 2;
    cfg.model.blocks = 1;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 32;
    cfg.inference.epochs = 2;
    cfg.inference.agg_heads = 2;
    cfg.inference.agg_blocks = 1;
    cfg.eval.n_negatives = 20;
    cfg.set_seed(3);
    cfg
}

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    for doc in [r#"{"tua": 0.5}"#, r#"{"model": {"dims": 8}}"#, r#"{"inference": {"kappa": 3}}"#] {
        let e = PipelineConfig::from_json(doc.as_bytes()).unwrap_err();
        assert!(matches!(e, PipelineError::Config(_)), "{doc}");
        assert_eq!(e.exit_code(), 2);
    }
}

#[test]
fn missing_keys_take_defaults_and_seed_propagates() {
    let cfg = PipelineConfig::from_json(br#"{"seed": 9, "tau": 0.3}"#).unwrap();
    assert_eq!(cfg.tau, 0.3);
    assert_eq!(cfg.model.max_len, 50);
    assert_eq!(cfg.inference.kappa_max, 10);
    assert_eq!(cfg.pretrain.seed, 9);
    assert_eq!(cfg.inference.seed, 9);
}

#[test]
fn validation_rejects_out_of_range_values() {
    let bad = [
        r#"{"tau": 0.0}"#,
        r#"{"tau": 1.0}"#,
        r#"{"inference": {"kappa_max": 0}}"#,
        r#"{"model": {"max_len": 1}}"#,
        r#"{"eval": {"n_negatives": 0}}"#,
    ];
    for doc in bad {
        let cfg = PipelineConfig::from_json(doc.as_bytes()).unwrap();
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))), "{doc}");
    }
    assert!(PipelineConfig::default().validate().is_ok());
}

#[test]
fn load_resolves_paths_next_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, br#"{"data": {"path": "log.csv"}, "out_dir": "out"}"#).unwrap();
    let cfg = PipelineConfig::load(&p).unwrap();
    assert_eq!(cfg.data.path, dir.path().join("log.csv"));
    assert_eq!(cfg.out_dir, dir.path().join("out"));
}

#[test]
fn config_hash_ignores_output_directory() {
    let mut a = PipelineConfig::default();
    let h = a.hash();
    a.out_dir = PathBuf::from("elsewhere");
    assert_eq!(a.hash(), h);
    a.tau = 0.4;
    assert_ne!(a.hash(), h);
}

#[test]
fn second_workspace_handle_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let e = Workspace::open(dir.path()).err().unwrap();
    assert!(matches!(e, PipelineError::Busy(_)));
    drop(ws);
    assert!(Workspace::open(dir.path()).is_ok());
}

#[test]
fn ingest_is_idempotent_and_counts_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), Variant::Gru);
    let (path, store) = ingest(&cfg).unwrap();
    let first = fs::read(&path).unwrap();
    let (_, again) = ingest(&cfg).unwrap();
    assert_eq!(store.dataset_hash, again.dataset_hash);
    assert_eq!(first, fs::read(&path).unwrap());

    // counting oracle straight from the file
    let text = fs::read_to_string(&cfg.data.path).unwrap();
    let mut per_user: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        per_user.entry(f[0]).or_default().push(f[1]);
    }
    per_user.retain(|_, v| v.len() >= cfg.data.min_actions);
    let actions: usize = per_user.values().map(Vec::len).sum();
    let items: BTreeSet<&str> = per_user.values().flatten().copied().collect();
    assert_eq!(store.stats.users, per_user.len());
    assert_eq!(store.stats.items, items.len());
    assert_eq!(store.stats.actions, actions);
    assert_eq!(store.stats.avg_actions_per_user, actions as f64 / per_user.len() as f64);

    let ws = Workspace::open(&cfg.out_dir).unwrap();
    assert_eq!(ws.manifest().unwrap().dataset_hash.as_deref(), Some(store.dataset_hash.as_str()));
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), Variant::Gru);
    cfg.data.path = dir.path().join("absent.csv");
    let e = ingest(&cfg).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("absent.csv"), "{e}");
}

#[test]
fn commands_need_an_ingested_store() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), Variant::Gru);
    let e = pretrain(&cfg, false).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn zero_epoch_pretrain_emits_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), Variant::Transformer);
    cfg.pretrain.epochs = 0;
    let (_, store) = ingest(&cfg).unwrap();
    let out = pretrain(&cfg, false).unwrap();
    let m = Checkpoint::load(&out.checkpoint).unwrap().into_model(&store.catalog.hash()).unwrap();
    let init = RecModel::new(cfg.model.clone(), store.catalog.len(), cfg.seed).unwrap();
    assert_eq!(m.params, init.params);
    assert!(out.metrics.is_empty());
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), Variant::Gru);
    cfg.pretrain.epochs = 3;
    ingest(&cfg).unwrap();
    let full = pretrain(&cfg, false).unwrap();
    let full_bytes = fs::read(&full.checkpoint).unwrap();

    let dir2 = tempfile::tempdir().unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.out_dir = dir2.path().join("run");
    ingest(&cfg2).unwrap();
    // a two-epoch run leaves a snapshot under a different key; copy it
    // to the three-epoch name to simulate an interruption
    let mut short = cfg2.clone();
    short.pretrain.epochs = 2;
    pretrain(&short, false).unwrap();
    let snapshot = fs::read_dir(&cfg2.out_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with(".state.json"))
        .unwrap();
    let target = cfg2.out_dir.join(full.checkpoint.file_name().unwrap()).with_extension("state.json");
    fs::copy(&snapshot, &target).unwrap();
    let resumed = pretrain(&cfg2, true).unwrap();
    assert_eq!(resumed.metrics, full.metrics);
    assert_eq!(fs::read(&resumed.checkpoint).unwrap(), full_bytes);
}

#[test]
fn end_to_end_commands_and_lineage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), Variant::Gru);
    let (_, store) = ingest(&cfg).unwrap();
    let pre = pretrain(&cfg, false).unwrap();
    let base_bytes = fs::read(&pre.checkpoint).unwrap();
    let inf = train_inference(&cfg, &pre.checkpoint).unwrap();
    assert_eq!(inf.report.curve.len(), cfg.inference.epochs);

    // frozen interpreter: stored enc.* equals the recommender's encoder
    let ick = Checkpoint::load(&inf.inference).unwrap();
    let model = Checkpoint::load(&pre.checkpoint).unwrap().into_model(&store.catalog.hash()).unwrap();
    let enc = ick.params.subset("enc.");
    assert!(!enc.is_empty());
    for (_, p) in enc.iter() {
        assert_eq!(model.params.value(&p.name).unwrap(), &p.value, "{}", p.name);
    }

    let out = apply_eval(&cfg, &pre.checkpoint, &inf.inference).unwrap();
    for g in ["head", "tail", "all"] {
        for m in ["hr5", "hr10", "mrr"] {
            let after = serde_json::to_value(&out.after).unwrap()[g][m].as_f64().unwrap();
            let before = serde_json::to_value(&out.before).unwrap()[g][m].as_f64().unwrap();
            assert_eq!(out.delta[g][m].as_f64().unwrap(), after - before, "{g}.{m}");
        }
    }
    let before_bytes = fs::read(&out.after_path).unwrap();
    let again = apply_eval(&cfg, &pre.checkpoint, &inf.inference).unwrap();
    assert_eq!(fs::read(&again.after_path).unwrap(), before_bytes);

    // singleton sweep equals the single evaluation
    let (csv, curve) = sweep(&cfg, SweepParam::Tau, &[cfg.tau], &pre.checkpoint, None).unwrap();
    assert_eq!(curve, vec![(cfg.tau, out.after.all.hr10)]);
    assert!(fs::read_to_string(csv).unwrap().starts_with("value,hr10_all\n"));
    let (_, curve) = sweep(&cfg, SweepParam::Tau, &[0.6, 0.2, 0.4], &pre.checkpoint, None).unwrap();
    assert_eq!(curve.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0.2, 0.4, 0.6]);
    let (_, curve) = sweep(&cfg, SweepParam::Kappa, &[3.0, 1.0], &pre.checkpoint, Some(&inf.inference)).unwrap();
    assert_eq!(curve.len(), 2);
    assert!(sweep(&cfg, SweepParam::Kappa, &[0.5], &pre.checkpoint, None).is_err());

    for kind in [BaselineKind::Pop, BaselineKind::Spop, BaselineKind::Fomc] {
        baseline(&cfg, kind, None).unwrap();
    }
    assert_eq!(baseline(&cfg, BaselineKind::Rerank, None).unwrap_err().exit_code(), 2);
    baseline(&cfg, BaselineKind::Rerank, Some(&pre.checkpoint)).unwrap();

    let csv = export_embeddings(&cfg, &pre.checkpoint, Some(&inf.inference)).unwrap();
    let text = fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), store.catalog.len() + 1);
    assert!(text.contains(",inferred,"));

    // a function fitted on another recommender is refused
    let mut other = cfg.clone();
    other.set_seed(4);
    let pre2 = pretrain(&other, false).unwrap();
    let e = apply_eval(&cfg, &pre2.checkpoint, &inf.inference).unwrap_err();
    assert!(matches!(e, PipelineError::Lineage(_)), "{e}");
    assert_eq!(e.exit_code(), 3);

    // new items
    let known: Vec<String> = store.catalog.items()[..4].to_vec();
    let file = dir.path().join("new.json");
    let spec = NewItemFile {
        items: vec![NewItemSpec {
            name: "fresh".into(),
            windows: vec![WindowSpec { left: known[..2].to_vec(), right: known[2..3].to_vec() }],
            tests: vec![known.clone()],
        }],
    };
    fs::write(&file, serde_json::to_vec(&spec).unwrap()).unwrap();
    let got = new_item(&cfg, &pre.checkpoint, &inf.inference, &file).unwrap();
    assert_eq!(got.embeddings.len(), 1);
    assert_eq!(got.embeddings[0].1.item, store.catalog.len());
    let rep = got.report.unwrap();
    assert_eq!(rep.tail.support, 1);
    assert_eq!(fs::read(&pre.checkpoint).unwrap(), base_bytes);
    let ext = Checkpoint::load(&got.checkpoint).unwrap();
    assert_eq!(ext.n_items, store.catalog.len() + 1);

    let mut bad = spec.clone();
    bad.items[0].windows[0].left.push("no-such-item".into());
    fs::write(&file, serde_json::to_vec(&bad).unwrap()).unwrap();
    let e = new_item(&cfg, &pre.checkpoint, &inf.inference, &file).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("no-such-item"), "{e}");

    let ws = Workspace::open(&cfg.out_dir).unwrap();
    let manifest = ws.manifest().unwrap();
    let applied = manifest.artifacts.iter().find(|a| a.kind == "applied").unwrap();
    assert_eq!(applied.parents, vec![pre.sha256.clone(), inf.sha256.clone()]);
}

#[test]
fn contextless_targets_fail_as_training_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), Variant::Gru);
    let (_, store) = ingest(&cfg).unwrap();
    let mut zero = cfg.clone();
    zero.pretrain.epochs = 0;
    let pre = pretrain(&zero, false).unwrap();
    // one training item per user leaves no GRU window with left context
    let ws = Workspace::open(&cfg.out_dir).unwrap();
    let mut stripped = store.clone();
    for u in &mut stripped.split.users {
        u.train.truncate(1);
    }
    fs::write(ws.path("store.json"), to_json(&stripped)).unwrap();
    drop(ws);
    let e = train_inference(&cfg, &pre.checkpoint).unwrap_err();
    assert!(matches!(e, PipelineError::Training(_)), "{e}");
    assert_eq!(e.exit_code(), 4);
}
