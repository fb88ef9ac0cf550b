use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{short_key, to_json, PipelineConfig, PipelineError, Store, Workspace};
use crate::dataset::{
    self, build_sequences, extract_context_sets, partition_head_tail, split_leave_one_out, ContextSet,
    ContextWindow, DataError, DatasetStats, NegativeSampler, PopularityPartition,
};
use crate::eval::{
    build_cases, delta, evaluate, write_ranks_csv, EvalCase, FomcScorer, MetricsReport, PopScorer, RerankScorer,
    Scorer, SpopScorer, Target, Transitions,
};
use crate::model::{bytes_hash, Checkpoint, CheckpointKind, RecModel};
use crate::pretrain::{EpochMetrics, PretrainState, Pretrainer};
use crate::rng;
use crate::tailinfer::{
    apply_embeddings, infer_embeddings, train_inference_function, window_sizes, InferenceFunction,
    InferredEmbedding, Provenance, TargetSet, TrainReport,
};

const STORE: &str = "store.json";

fn read(path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(|e| PipelineError::io(path, e))
}

fn json_string<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data")
}

/// Read, validate and persist the interaction log.
pub fn ingest(cfg: &PipelineConfig) -> Result<(PathBuf, Store), PipelineError> {
    cfg.validate()?;
    let ws = Workspace::open(&cfg.out_dir)?;
    let report = dataset::ingest(&cfg.data.path, cfg.data.format)?;
    if report.malformed > 0 {
        log::warn!("skipped {} malformed lines (first: {:?})", report.malformed, report.malformed_lines.first());
    }
    let (mut catalog, seqs) = build_sequences(&report.interactions, cfg.data.min_actions)?;
    let stats = dataset::stats(&catalog, &seqs);
    let split = split_leave_one_out(&mut catalog, &seqs)?;
    let input = bytes_hash(&read(&cfg.data.path)?);
    let store = Store::new(cfg.data.path.display().to_string(), cfg.data.min_actions, stats, catalog, split);
    let (path, _) = ws.emit(cfg, "store", STORE, &to_json(&store), &[input])?;
    ws.set_dataset_hash(&store.dataset_hash)?;
    Ok((path, store))
}

/// The ingested store of the run directory.
pub fn load_store(dir: &Path) -> Result<Store, PipelineError> {
    let p = dir.join(STORE);
    if !p.exists() {
        return Err(PipelineError::Data(format!("{} not found; run `ingest` first", p.display())));
    }
    let mut store: Store =
        serde_json::from_slice(&read(&p)?).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))?;
    store.catalog.reindex();
    Ok(store)
}

fn load_recommender(path: &Path, store: &Store) -> Result<(RecModel, String), PipelineError> {
    let bytes = read(path)?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    if ck.kind != CheckpointKind::Recommender {
        return Err(PipelineError::Data(format!("{} is not a recommender checkpoint", path.display())));
    }
    ck.verify_catalog(&store.catalog.hash())
        .map_err(|e| PipelineError::Lineage(format!("{}: {e}", path.display())))?;
    Ok((ck.into_model(&store.catalog.hash())?, bytes_hash(&bytes)))
}

fn load_inference(path: &Path, store: &Store, source_hash: &str) -> Result<(InferenceFunction, String), PipelineError> {
    let bytes = read(path)?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    if ck.kind != CheckpointKind::Inference {
        return Err(PipelineError::Data(format!("{} is not an inference checkpoint", path.display())));
    }
    if ck.source_hash.as_deref() != Some(source_hash) {
        return Err(PipelineError::Lineage(format!(
            "{} was trained on recommender {}, not {source_hash}",
            path.display(),
            ck.source_hash.as_deref().unwrap_or("<unknown>")
        )));
    }
    ck.verify_catalog(&store.catalog.hash())
        .map_err(|e| PipelineError::Lineage(format!("{}: {e}", path.display())))?;
    Ok((InferenceFunction::from_checkpoint(ck)?, bytes_hash(&bytes)))
}

fn sampler(cfg: &PipelineConfig, store: &Store) -> NegativeSampler {
    NegativeSampler::new(&store.catalog, &store.split, cfg.eval.negative_popularity)
}

fn test_cases(cfg: &PipelineConfig, store: &Store, max_len: usize) -> Result<Vec<EvalCase>, PipelineError> {
    Ok(build_cases(&store.split, &sampler(cfg, store), cfg.eval.n_negatives, max_len, Target::Test, cfg.eval.seed)?)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub sha256: String,
    pub metrics: Vec<EpochMetrics>,
}

/// Pre-train the recommender. The full trainer state is snapshotted after
/// every epoch; with `resume` a matching snapshot is continued instead of
/// starting over.
pub fn pretrain(cfg: &PipelineConfig, resume: bool) -> Result<PretrainOutcome, PipelineError> {
    cfg.validate()?;
    let ws = Workspace::open(&cfg.out_dir)?;
    let store = load_store(ws.dir())?;
    let mut pcfg = cfg.pretrain.clone();
    let key = short_key(&[&store.dataset_hash, &json_string(&cfg.model), &json_string(&pcfg), &cfg.seed.to_string()]);
    let stem = format!("recommender-{}-{key}", json_string(&cfg.model.variant).trim_matches('"'));
    let state_path = ws.path(&format!("{stem}.state.json"));
    let val = build_cases(
        &store.split,
        &sampler(cfg, &store),
        cfg.eval.n_negatives,
        cfg.model.max_len,
        Target::Valid,
        cfg.eval.seed,
    )?;
    let n = store.catalog.len();
    let mut trainer = if resume && state_path.exists() {
        let state: PretrainState = serde_json::from_slice(&read(&state_path)?)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", state_path.display())))?;
        log::info!("resuming after epoch {}", state.epochs_done);
        Pretrainer::resume(cfg.model.clone(), n, pcfg.clone(), state)?
    } else {
        Pretrainer::new(RecModel::new(cfg.model.clone(), n, cfg.seed)?, pcfg.clone())?
    };
    while trainer.state().epochs_done < pcfg.epochs {
        let m = trainer.run_epoch(&store.split, &val)?;
        log::info!(
            "epoch {}: loss {:.5} val HR@10 {:.4} MRR {:.4}",
            m.epoch,
            m.train_loss,
            m.val_hr10,
            m.val_mrr
        );
        super::write_atomic(&state_path, &serde_json::to_vec(trainer.state()).expect("plain data"))?;
    }
    let best = trainer.best_model();
    let metrics = trainer.state().metrics.clone();
    pcfg.seed = cfg.seed;
    let mut ck = Checkpoint::from_model(&best, &store.catalog.hash());
    ck.settings = json!({
        "dataset_hash": store.dataset_hash,
        "pretrain": pcfg,
        "best_epoch": trainer.state().best_epoch,
    });
    let parents = [store.dataset_hash.clone()];
    let (checkpoint, sha256) = ws.emit(cfg, "recommender", &format!("{stem}.json"), &ck.to_bytes()?, &parents)?;
    let mut log_bytes = Vec::new();
    for m in &metrics {
        log_bytes.extend(serde_json::to_vec(m).expect("plain data"));
        log_bytes.push(b'\n');
    }
    ws.emit(cfg, "pretrain-metrics", &format!("{stem}.metrics.jsonl"), &log_bytes, &[sha256.clone()])?;
    Ok(PretrainOutcome { checkpoint, sha256, metrics })
}

/// Context sets of `items` sized for the model's interpreter.
fn context_sets(model: &RecModel, store: &Store, items: &[usize]) -> BTreeMap<usize, ContextSet> {
    let (l, r) = window_sizes(model.config());
    extract_context_sets(&store.split, items, l, r)
}

fn partition(store: &Store, tau: f64) -> Result<PopularityPartition, PipelineError> {
    Ok(partition_head_tail(&store.catalog.train_popularity, tau)?)
}

fn fit(
    cfg: &PipelineConfig,
    store: &Store,
    model: &RecModel,
    tau: f64,
) -> Result<(InferenceFunction, TrainReport), PipelineError> {
    let part = partition(store, tau)?;
    let targets = match cfg.inference.target_set {
        TargetSet::Head => part.head_items(),
        TargetSet::All => (0..model.n_items()).collect(),
    };
    let sets = context_sets(model, store, &targets);
    Ok(train_inference_function(model, &sets, &targets, &cfg.inference)?)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub inference: PathBuf,
    pub sha256: String,
    pub report: TrainReport,
}

/// Fit the inference function on the head items of `checkpoint`.
pub fn train_inference(cfg: &PipelineConfig, checkpoint: &Path) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    let ws = Workspace::open(&cfg.out_dir)?;
    let store = load_store(ws.dir())?;
    let (model, ck_hash) = load_recommender(checkpoint, &store)?;
    let (f, report) = fit(cfg, &store, &model, cfg.tau)?;
    let key = short_key(&[&ck_hash, &json_string(&cfg.inference), &cfg.tau.to_string()]);
    let ck = f.to_checkpoint(&store.catalog.hash(), model.n_items(), &ck_hash);
    let (inference, sha256) = ws.emit(cfg, "inference", &format!("inference-{key}.json"), &ck.to_bytes()?, &[ck_hash])?;
    ws.emit(cfg, "distance-curve", &format!("inference-{key}.curve.json"), &to_json(&report), &[sha256.clone()])?;
    Ok(TrainOutcome { inference, sha256, report })
}

#[derive(Clone, Debug)]
pub struct ApplyOutcome {
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub delta: serde_json::Value,
    pub before_path: PathBuf,
    pub after_path: PathBuf,
    pub delta_path: PathBuf,
    pub applied: PathBuf,
}

/// Infer tail embeddings, write them into the recommender and evaluate the
/// test split before and after.
pub fn apply_eval(cfg: &PipelineConfig, checkpoint: &Path, inference: &Path) -> Result<ApplyOutcome, PipelineError> {
    cfg.validate()?;
    let ws = Workspace::open(&cfg.out_dir)?;
    let store = load_store(ws.dir())?;
    let (model, ck_hash) = load_recommender(checkpoint, &store)?;
    let (f, inf_hash) = load_inference(inference, &store, &ck_hash)?;
    let part = partition(&store, cfg.tau)?;
    let sets = context_sets(&model, &store, &part.tail_items());
    let inferred = infer_embeddings(&f, &model, &sets, &part)?;
    let applied = apply_embeddings(&model, &inferred)?;
    let cases = test_cases(cfg, &store, model.config().max_len)?;
    let echo = |stage: &str| {
        json!({
            "stage": stage,
            "variant": model.config().variant,
            "tau": cfg.tau,
            "seed": cfg.seed,
            "eval": cfg.eval,
            "dataset_hash": store.dataset_hash,
            "recommender": ck_hash,
            "inference": inf_hash,
        })
    };
    let (mut before, _) = evaluate(&model, &cases, &part)?;
    before.config_echo = echo("before");
    let (mut after, ranks) = evaluate(&applied, &cases, &part)?;
    after.config_echo = echo("after");
    let d = delta(&before, &after);

    let key = short_key(&[&ck_hash, &inf_hash, &json_string(&cfg.eval), &cfg.tau.to_string()]);
    let mut ck = Checkpoint::from_model(&applied, &store.catalog.hash());
    ck.source_hash = Some(inf_hash.clone());
    ck.settings = json!({ "recommender": ck_hash, "inference": inf_hash, "tau": cfg.tau });
    let lineage = [ck_hash.clone(), inf_hash.clone()];
    let (applied_path, applied_sha) = ws.emit(cfg, "applied", &format!("applied-{key}.json"), &ck.to_bytes()?, &lineage)?;
    let (before_path, _) = ws.emit(cfg, "report", &format!("report-before-{key}.json"), &to_json(&before), &lineage)?;
    let after_parents = [ck_hash.clone(), inf_hash.clone(), applied_sha];
    let (after_path, _) = ws.emit(cfg, "report", &format!("report-after-{key}.json"), &to_json(&after), &after_parents)?;
    let (delta_path, _) = ws.emit(cfg, "delta", &format!("report-delta-{key}.json"), &to_json(&d), &after_parents)?;
    let mut csv = Vec::new();
    write_ranks_csv(&mut csv, &ranks).map_err(|e| PipelineError::io(ws.dir(), e))?;
    ws.emit(cfg, "ranks", &format!("ranks-after-{key}.csv"), &csv, &after_parents)?;
    Ok(ApplyOutcome { before, after, delta: d, before_path, after_path, delta_path, applied: applied_path })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Pop,
    Spop,
    Fomc,
    Rerank,
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pop" => Ok(Self::Pop),
            "spop" | "s-pop" => Ok(Self::Spop),
            "fomc" => Ok(Self::Fomc),
            "rerank" | "reranking" => Ok(Self::Rerank),
            other => Err(format!("unknown baseline `{other}` (expected pop, spop, fomc or rerank)")),
        }
    }
}

/// Evaluate a non-learned baseline, or popularity re-ranking of a trained
/// recommender.
pub fn baseline(
    cfg: &PipelineConfig,
    kind: BaselineKind,
    checkpoint: Option<&Path>,
) -> Result<(PathBuf, MetricsReport), PipelineError> {
    cfg.validate()?;
    let ws = Workspace::open(&cfg.out_dir)?;
    let store = load_store(ws.dir())?;
    let part = partition(&store, cfg.tau)?;
    let pop = store.catalog.train_popularity.clone();
    let model = match (kind, checkpoint) {
        (BaselineKind::Rerank, None) => {
            return Err(PipelineError::Config("the rerank baseline needs --checkpoint".into()))
        }
        (_, Some(p)) => Some(load_recommender(p, &store)?),
        (_, None) => None,
    };
    let max_len = model.as_ref().map_or(cfg.model.max_len, |(m, _)| m.config().max_len);
    let cases = test_cases(cfg, &store, max_len)?;
    let (mut report, _) = match kind {
        BaselineKind::Pop => evaluate(&PopScorer { popularity: pop }, &cases, &part)?,
        BaselineKind::Spop => evaluate(&SpopScorer { popularity: pop }, &cases, &part)?,
        BaselineKind::Fomc => {
            let scorer = FomcScorer { popularity: pop, transitions: Transitions::from_split(&store.split) };
            evaluate(&scorer, &cases, &part)?
        }
        BaselineKind::Rerank => {
            let (m, _) = model.as_ref().expect("checked above");
            let scorer = RerankScorer { base: m as &dyn Scorer, popularity: pop, k: cfg.eval.rerank_k };
            evaluate(&scorer, &cases, &part)?
        }
    };
    let name = json_string(&kind).trim_matches('"').to_string();
    let ck_hash = model.as_ref().map(|(_, h)| h.clone()).unwrap_or_default();
    report.config_echo = json!({
        "baseline": name,
        "tau": cfg.tau,
        "eval": cfg.eval,
        "dataset_hash": store.dataset_hash,
        "recommender": model.as_ref().map(|(_, h)| h.clone()),
    });
    let key = short_key(&[&store.dataset_hash, &json_string(&cfg.eval), &cfg.tau.to_string(), &ck_hash]);
    let mut parents = vec![store.dataset_hash.clone()];
    if !ck_hash.is_empty() {
        parents.push(ck_hash);
    }
    let (path, _) = ws.emit(cfg, "baseline", &format!("baseline-{name}-{key}.json"), &to_json(&report), &parents)?;
    Ok((path, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Tau,
    Kappa,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tau" => Ok(Self::Tau),
            "kappa" => Ok(Self::Kappa),
            other => Err(format!("unknown sweep parameter `{other}` (expected tau or kappa)")),
        }
    }
}

/// `value,hr10_all` for each value in ascending order. A tau sweep refits
/// the inference function per threshold; a kappa sweep reuses one function
/// (from `inference`, or fitted at the configured tau) and limits the
/// windows aggregated per tail item to κ.
pub fn sweep(
    cfg: &PipelineConfig,
    param: SweepParam,
    values: &[f64],
    checkpoint: &Path,
    inference: Option<&Path>,
) -> Result<(PathBuf, Vec<(f64, f64)>), PipelineError> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(PipelineError::Config("sweep needs at least one value".into()));
    }
    let mut vals = values.to_vec();
    for &v in &vals {
        let ok = match param {
            SweepParam::Tau => v > 0.0 && v < 1.0,
            SweepParam::Kappa => v >= 1.0 && v.fract() == 0.0,
        };
        if !ok {
            return Err(PipelineError::Config(format!("invalid {} value {v}", json_string(&param).trim_matches('"'))));
        }
    }
    vals.sort_by(f64::total_cmp);
    vals.dedup();

    let ws = Workspace::open(&cfg.out_dir)?;
    let store = load_store(ws.dir())?;
    let (model, ck_hash) = load_recommender(checkpoint, &store)?;
    let cases = test_cases(cfg, &store, model.config().max_len)?;
    let all_items: Vec<usize> = (0..model.n_items()).collect();
    let sets = context_sets(&model, &store, &all_items);
    let mut parents = vec![ck_hash.clone()];

    let run = |f: &InferenceFunction, tau: f64| -> Result<f64, PipelineError> {
        let part = partition(&store, tau)?;
        let applied = apply_embeddings(&model, &infer_embeddings(f, &model, &sets, &part)?)?;
        Ok(evaluate(&applied, &cases, &part)?.0.all.hr10)
    };
    let mut curve = Vec::with_capacity(vals.len());
    match param {
        SweepParam::Tau => {
            for &tau in &vals {
                let (f, _) = fit(cfg, &store, &model, tau)?;
                curve.push((tau, run(&f, tau)?));
            }
        }
        SweepParam::Kappa => {
            let mut f = match inference {
                Some(p) => {
                    let (f, h) = load_inference(p, &store, &ck_hash)?;
                    parents.push(h);
                    f
                }
                None => fit(cfg, &store, &model, cfg.tau)?.0,
            };
            for &k in &vals {
                f.config.context_batch_cap = k as usize;
                curve.push((k, run(&f, cfg.tau)?));
            }
        }
    }

    let pname = json_string(&param).trim_matches('"').to_string();
    let mut body = String::from("value,hr10_all\n");
    for (v, h) in &curve {
        body.push_str(&format!("{v},{h}\n"));
    }
    let key = short_key(&[
        &ck_hash,
        parents.get(1).map_or("", |s| s.as_str()),
        &json_string(&vals),
        &json_string(&cfg.inference),
        &json_string(&cfg.eval),
        &cfg.tau.to_string(),
    ]);
    let (path, _) = ws.emit(cfg, "sweep", &format!("sweep-{pname}-{key}.csv"), body.as_bytes(), &parents)?;
    Ok((path, curve))
}

/// Context file for `new-item`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewItemFile {
    pub items: Vec<NewItemSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewItemSpec {
    pub name: String,
    pub windows: Vec<WindowSpec>,
    /// Histories whose next item is this new item; each becomes one
    /// evaluation case.
    #[serde(default)]
    pub tests: Vec<Vec<String>>,
}

/// Items consumed right before and right after the new item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    #[serde(default)]
    pub left: Vec<String>,
    #[serde(default)]
    pub right: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct NewItemOutcome {
    pub checkpoint: PathBuf,
    pub catalog: PathBuf,
    pub embeddings: Vec<(String, InferredEmbedding)>,
    pub report: Option<MetricsReport>,
    pub report_path: Option<PathBuf>,
}

fn resolve(catalog: &dataset::Catalog, names: &[String]) -> Result<Vec<usize>, PipelineError> {
    names
        .iter()
        .map(|n| catalog.index_of(n).ok_or_else(|| DataError::UnknownItem(n.clone()).into()))
        .collect()
}

/// Give each listed new item an embedding inferred from its windows and
/// append it to a copy of the recommender; no gradient step is taken.
/// Items may reference new items listed before them.
pub fn new_item(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    inference: &Path,
    context_file: &Path,
) -> Result<NewItemOutcome, PipelineError> {
    cfg.validate()?;
    let spec: NewItemFile = serde_json::from_slice(&read(context_file)?)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", context_file.display())))?;
    if spec.items.is_empty() {
        return Err(PipelineError::Data(format!("{} lists no items", context_file.display())));
    }
    let ws = Workspace::open(&cfg.out_dir)?;
    let store = load_store(ws.dir())?;
    let (base, ck_hash) = load_recommender(checkpoint, &store)?;
    let (f, inf_hash) = load_inference(inference, &store, &ck_hash)?;
    let context_hash = bytes_hash(&read(context_file)?);

    let mut catalog = store.catalog.clone();
    let mut model = base.clone();
    let mut embeddings = Vec::with_capacity(spec.items.len());
    for item in &spec.items {
        if catalog.index_of(&item.name).is_some() {
            return Err(PipelineError::Data(format!("item `{}` is already in the catalog", item.name)));
        }
        let windows = item
            .windows
            .iter()
            .map(|w| Ok(ContextWindow::detached(resolve(&catalog, &w.left)?, 0, resolve(&catalog, &w.right)?)))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let (e, m) = crate::tailinfer::infer_new_item(&f, &model, &mut catalog, &item.name, &windows)?;
        model = m;
        embeddings.push((item.name.clone(), e));
    }

    // new items join the tail; negatives come from the original catalog
    let mut part = partition(&store, cfg.tau)?;
    part.extend_tail(catalog.len());
    let neg = sampler(cfg, &store);
    let max_len = model.config().max_len;
    let mut cases = Vec::new();
    for (item, (_, e)) in spec.items.iter().zip(&embeddings) {
        for hist in &item.tests {
            let h = resolve(&catalog, hist)?;
            let mut r = rng::derive(cfg.eval.seed, &[rng::stream::EVAL, 3, cases.len() as u64]);
            let mut candidates = vec![e.item];
            candidates.extend(neg.sample(e.item, &h, cfg.eval.n_negatives, &mut r)?);
            let start = h.len().saturating_sub(max_len);
            cases.push(EvalCase { user: cases.len(), history: h[start..].to_vec(), candidates });
        }
    }

    let key = short_key(&[&ck_hash, &inf_hash, &context_hash, &json_string(&cfg.eval)]);
    let catalog_hash = catalog.hash();
    let mut ck = Checkpoint::from_model(&model, &catalog_hash);
    ck.source_hash = Some(inf_hash.clone());
    ck.settings = json!({
        "recommender": ck_hash,
        "inference": inf_hash,
        "context_file": context_hash,
        "new_items": embeddings.iter().map(|(n, e)| json!({"name": n, "index": e.item})).collect::<Vec<_>>(),
    });
    let lineage = [ck_hash.clone(), inf_hash.clone(), context_hash.clone()];
    let (checkpoint_path, _) = ws.emit(cfg, "new-item", &format!("newitem-{key}.json"), &ck.to_bytes()?, &lineage)?;
    let (catalog_path, _) =
        ws.emit(cfg, "new-item-catalog", &format!("newitem-{key}.catalog.json"), &to_json(&catalog), &lineage)?;
    let (report, report_path) = if cases.is_empty() {
        (None, None)
    } else {
        let (mut rep, _) = evaluate(&model, &cases, &part)?;
        rep.config_echo = json!({
            "stage": "new-item",
            "eval": cfg.eval,
            "recommender": ck_hash,
            "inference": inf_hash,
            "context_file": context_hash,
        });
        let (p, _) = ws.emit(cfg, "new-item-report", &format!("newitem-{key}.report.json"), &to_json(&rep), &lineage)?;
        (Some(rep), Some(p))
    };
    Ok(NewItemOutcome { checkpoint: checkpoint_path, catalog: catalog_path, embeddings, report, report_path })
}

/// CSV of the item table. With an inference checkpoint the tail rows are
/// replaced by their inferred embeddings and marked as such.
pub fn export_embeddings(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    inference: Option<&Path>,
) -> Result<PathBuf, PipelineError> {
    cfg.validate()?;
    let ws = Workspace::open(&cfg.out_dir)?;
    let store = load_store(ws.dir())?;
    let (model, ck_hash) = load_recommender(checkpoint, &store)?;
    let mut parents = vec![ck_hash.clone()];
    let (table, provenance) = match inference {
        Some(p) => {
            let (f, h) = load_inference(p, &store, &ck_hash)?;
            parents.push(h);
            let part = partition(&store, cfg.tau)?;
            let sets = context_sets(&model, &store, &part.tail_items());
            let inferred = infer_embeddings(&f, &model, &sets, &part)?;
            let prov: Vec<Provenance> = inferred.iter().map(|e| e.provenance).collect();
            (apply_embeddings(&model, &inferred)?, prov)
        }
        None => (model, Vec::new()),
    };
    let mut out = Vec::new();
    crate::tailinfer::write_embeddings_csv(&mut out, &table, &store.catalog, &provenance)?;
    let key = short_key(&[&parents.join(","), &cfg.tau.to_string()]);
    let (path, _) = ws.emit(cfg, "embeddings", &format!("embeddings-{key}.csv"), &out, &parents)?;
    Ok(path)
}

/// Printable summary of the ingested corpus.
pub fn format_stats(s: &DatasetStats) -> String {
    format!(
        "users {}\nitems {}\nactions {}\navg actions/user {:.2}\navg actions/item {:.2}",
        s.users, s.items, s.actions, s.avg_actions_per_user, s.avg_actions_per_item
    )
}
