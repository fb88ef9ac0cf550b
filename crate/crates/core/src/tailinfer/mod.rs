//! Contextual inference of item embeddings.
//!
//! A context interpreter (the recommender's encoder, usually frozen) turns
//! every window around an occurrence of an item into a vector; an
//! aggregator (self-attention blocks without positions, mean pooling and an
//! affine map) combines the window vectors into one embedding. The function
//! is fitted on head items, whose trained embeddings serve as targets, and
//! then used to replace the embeddings of tail items and to create
//! embeddings for new items without any gradient step on the recommender.

mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Catalog, ContextSet, ContextWindow, DataError, PopularityPartition};
use crate::model::layers::{self, Pass};
use crate::model::{
    encoder_hidden, init_attention_block, init_encoder, trunc_normal, Checkpoint, CheckpointKind, ModelConfig,
    ModelError, RecModel, Token, Variant, FORMAT_VERSION,
};
use crate::numerics::{kernels, ParamSet, Tape, Tensor, Var};
use crate::rng::{self, Rng};

pub use train::{reproduction_quality, train_inference_function, Quality, TrainReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("context error: {0}")]
    Context(String),
    #[error("invalid inference configuration: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSet {
    #[default]
    Head,
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpreterInit {
    #[default]
    Pretrained,
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub kappa_max: usize,
    pub agg_blocks: usize,
    pub agg_heads: usize,
    pub agg_dropout: f64,
    pub epochs: usize,
    /// Target items per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub l2: f64,
    pub target_set: TargetSet,
    pub few_shot: bool,
    pub phi_alpha_init: InterpreterInit,
    pub phi_alpha_frozen: bool,
    /// Most windows aggregated for one item at inference.
    pub context_batch_cap: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            kappa_max: 10,
            agg_blocks: 2,
            agg_heads: 4,
            agg_dropout: 0.0,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 50,
            l2: 0.0,
            target_set: TargetSet::Head,
            few_shot: true,
            phi_alpha_init: InterpreterInit::Pretrained,
            phi_alpha_frozen: true,
            context_batch_cap: 64,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, dim: usize) -> Result<(), InferError> {
        let err = |m: String| Err(InferError::Config(m));
        if self.kappa_max < 1 {
            return err("kappa_max must be at least 1".into());
        }
        if self.agg_blocks < 1 {
            return err("the aggregator needs at least one block".into());
        }
        if self.agg_heads == 0 || dim % self.agg_heads != 0 {
            return err(format!("{} aggregator heads do not divide dim {dim}", self.agg_heads));
        }
        if !(0.0..1.0).contains(&self.agg_dropout) {
            return err(format!("agg_dropout {} outside [0, 1)", self.agg_dropout));
        }
        if self.batch_size == 0 || self.context_batch_cap == 0 {
            return err("batch_size and context_batch_cap must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.l2 >= 0.0) {
            return err("learning_rate and l2 must be non-negative".into());
        }
        Ok(())
    }
}

/// Context extent `(left, right)` for an encoder: symmetric around the
/// target for the transformer, strictly-left for the GRU.
pub fn window_sizes(cfg: &ModelConfig) -> (usize, usize) {
    match cfg.variant {
        Variant::Transformer => {
            let w = cfg.max_len.saturating_sub(2) / 2;
            (w, w)
        }
        Variant::Gru => (cfg.max_len - 1, 0),
    }
}

/// Whether a window gives the interpreter anything to read.
pub fn usable(cfg: &ModelConfig, w: &ContextWindow) -> bool {
    match cfg.variant {
        Variant::Transformer => w.context_len() > 0,
        Variant::Gru => !w.left.is_empty(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Inferred,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferredEmbedding {
    pub item: usize,
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

/// The fitted inference function: interpreter parameters under `enc.*`
/// and aggregator parameters under `agg.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceFunction {
    pub config: InferenceConfig,
    pub model_config: ModelConfig,
    pub params: ParamSet,
}

impl InferenceFunction {
    /// Interpreter copied from (or shaped like) the recommender's encoder,
    /// aggregator freshly initialized.
    pub fn init(model: &RecModel, config: &InferenceConfig) -> Result<Self, InferError> {
        let mcfg = model.config().clone();
        config.validate(mcfg.dim)?;
        let mut params = match config.phi_alpha_init {
            InterpreterInit::Pretrained => model.params.subset("enc."),
            InterpreterInit::Scratch => {
                let mut p = ParamSet::new();
                init_encoder(&mcfg, &mut p, &mut rng::derive(config.seed, &[rng::stream::INFER_INIT, 0]));
                p
            }
        };
        params.set_trainable_prefix("enc.", !config.phi_alpha_frozen);
        let mut r = rng::derive(config.seed, &[rng::stream::INFER_INIT, 1]);
        let d = mcfg.dim;
        for b in 0..config.agg_blocks {
            init_attention_block(&mut params, &format!("agg.b{b}"), d, mcfg.init_std, &mut r);
        }
        params.insert("agg.out.w", trunc_normal(&mut r, &[d, d], mcfg.init_std));
        params.insert("agg.out.b", Tensor::zeros(&[d]));
        Ok(Self { config: config.clone(), model_config: mcfg, params })
    }

    /// Embedding-layer parameters of `model` (read-only) joined with this
    /// function's parameters.
    pub fn joined(&self, model: &RecModel) -> Result<ParamSet, InferError> {
        if model.config() != &self.model_config {
            return Err(InferError::Config("inference function was built for a different model".into()));
        }
        let mut full = model.params.subset("emb.");
        full.set_trainable_prefix("emb.", false);
        full.merge(&self.params);
        Ok(full)
    }

    /// One window vector.
    pub fn interpret(&self, model: &RecModel, window: &ContextWindow) -> Result<Vec<f64>, InferError> {
        let full = self.joined(model)?;
        let mut tape = Tape::new();
        let v = interpret_var(&mut tape, &full, &self.model_config, model.n_items(), window)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Combine window vectors into one embedding.
    pub fn aggregate(&self, reprs: &[Vec<f64>]) -> Result<Vec<f64>, InferError> {
        if reprs.is_empty() {
            return Err(InferError::Context("no context vectors to aggregate".into()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(reprs).map_err(ModelError::from)?);
        let mut r = rng::derive(0, &[]);
        let out = aggregate_var(&mut tape, &self.params, &self.config, x, &mut Pass { training: false, rng: &mut r })?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Embedding inferred from the given windows (all of them are used).
    pub fn infer(&self, model: &RecModel, windows: &[ContextWindow]) -> Result<Vec<f64>, InferError> {
        let reprs = windows.iter().map(|w| self.interpret(model, w)).collect::<Result<Vec<_>, _>>()?;
        self.aggregate(&reprs)
    }

    pub fn to_checkpoint(&self, catalog_hash: &str, n_items: usize, source_hash: &str) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Inference,
            catalog_hash: catalog_hash.to_string(),
            n_items,
            model: self.model_config.clone(),
            source_hash: Some(source_hash.to_string()),
            settings: serde_json::to_value(&self.config).expect("plain config"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, InferError> {
        if ck.kind != CheckpointKind::Inference {
            return Err(ModelError::Checkpoint("not an inference checkpoint".into()).into());
        }
        let config: InferenceConfig =
            serde_json::from_value(ck.settings).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Ok(Self { config, model_config: ck.model, params: ck.params })
    }
}

/// Interpreter output for one window as a `1×d` variable: the final hidden
/// row at the masked target slot (transformer) or the last state of the
/// left context (GRU).
pub fn interpret_var(
    tape: &mut Tape,
    full: &ParamSet,
    cfg: &ModelConfig,
    n_items: usize,
    w: &ContextWindow,
) -> Result<Var, InferError> {
    if !usable(cfg, w) {
        return Err(InferError::Context(format!("window around item {} has no context", w.target)));
    }
    let (left_cap, right_cap) = window_sizes(cfg);
    let left = &w.left[w.left.len().saturating_sub(left_cap)..];
    let right = &w.right[..w.right.len().min(right_cap)];
    let mut tokens: Vec<Token> = left.iter().map(|&i| Token::Item(i)).collect();
    let row = match cfg.variant {
        Variant::Transformer => {
            tokens.push(Token::Mask);
            tokens.extend(right.iter().map(|&i| Token::Item(i)));
            left.len()
        }
        Variant::Gru => left.len() - 1,
    };
    let mut r = rng::derive(0, &[]);
    let mut pass = Pass { training: false, rng: &mut r };
    let (_, hidden) = encoder_hidden(tape, full, cfg, n_items, &tokens, cfg.total_len(), &mut pass)?;
    Ok(tape.slice_rows(hidden, row, 1).map_err(ModelError::from)?)
}

/// Aggregator over the rows of `x` (`κ×d`), returning `1×d`.
pub fn aggregate_var(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &InferenceConfig,
    x: Var,
    pass: &mut Pass<'_>,
) -> Result<Var, InferError> {
    let mut h = x;
    for b in 0..cfg.agg_blocks {
        let (_, out) =
            layers::attention_block(tape, params, &format!("agg.b{b}"), h, cfg.agg_heads, cfg.agg_dropout, 1e-6, pass)?;
        h = out;
    }
    let pooled = tape.mean_rows(h);
    let w = tape.param_named(params, "agg.out.w").map_err(ModelError::from)?;
    let b = tape.param_named(params, "agg.out.b").map_err(ModelError::from)?;
    let y = tape.matmul(pooled, w).map_err(ModelError::from)?;
    Ok(tape.add_row_bias(y, b).map_err(ModelError::from)?)
}

/// Usable windows of an item, subsampled uniformly to at most `cap`.
pub fn capped_windows<'a>(
    cfg: &ModelConfig,
    set: &'a ContextSet,
    cap: usize,
    rng: &mut Rng,
) -> Vec<&'a ContextWindow> {
    let mut ws: Vec<&ContextWindow> = set.windows.iter().filter(|w| usable(cfg, w)).collect();
    if ws.len() > cap {
        ws = rand::seq::index::sample(rng, ws.len(), cap).into_iter().map(|i| ws[i]).collect();
    }
    ws
}

/// New embeddings for tail items with at least one usable window; head
/// items and contextless tail items keep their trained rows.
pub fn infer_embeddings(
    f: &InferenceFunction,
    model: &RecModel,
    sets: &BTreeMap<usize, ContextSet>,
    partition: &PopularityPartition,
) -> Result<Vec<InferredEmbedding>, InferError> {
    use rayon::prelude::*;
    let full = f.joined(model)?;
    let cfg = &f.model_config;
    (0..model.n_items())
        .into_par_iter()
        .map(|item| {
            let original = || -> Result<InferredEmbedding, InferError> {
                Ok(InferredEmbedding {
                    item,
                    vector: model.item_embedding(item)?.to_vec(),
                    provenance: Provenance::Original,
                })
            };
            if !partition.is_tail(item) {
                return original();
            }
            let Some(set) = sets.get(&item) else { return original() };
            let mut r = rng::derive(f.config.seed, &[rng::stream::SUBSAMPLE, item as u64]);
            let ws = capped_windows(cfg, set, f.config.context_batch_cap, &mut r);
            if ws.is_empty() {
                log::debug!("tail item {item} has no usable context; keeping its trained embedding");
                return original();
            }
            let mut tape = Tape::new();
            let rows = ws
                .iter()
                .map(|w| interpret_var(&mut tape, &full, cfg, model.n_items(), w))
                .collect::<Result<Vec<_>, _>>()?;
            let x = tape.concat_rows(&rows).map_err(ModelError::from)?;
            let mut r = rng::derive(0, &[]);
            let out = aggregate_var(&mut tape, &full, &f.config, x, &mut Pass { training: false, rng: &mut r })?;
            Ok(InferredEmbedding { item, vector: tape.value(out).data().to_vec(), provenance: Provenance::Inferred })
        })
        .collect()
}

/// Copy of `model` with every inferred row written into the shared table.
/// Nothing else changes.
pub fn apply_embeddings(model: &RecModel, inferred: &[InferredEmbedding]) -> Result<RecModel, InferError> {
    let mut out = model.clone();
    for e in inferred.iter().filter(|e| e.provenance == Provenance::Inferred) {
        if e.vector.len() != model.config().dim {
            return Err(InferError::Config(format!(
                "embedding for item {} has {} values, expected {}",
                e.item,
                e.vector.len(),
                model.config().dim
            )));
        }
        out.set_item_embedding(e.item, &e.vector)?;
    }
    Ok(out)
}

/// Register `name` as a new item and give it an embedding inferred from
/// `windows`; the windows' targets are ignored (masked or excluded), so
/// they may carry any placeholder.
pub fn infer_new_item(
    f: &InferenceFunction,
    model: &RecModel,
    catalog: &mut Catalog,
    name: &str,
    windows: &[ContextWindow],
) -> Result<(InferredEmbedding, RecModel), InferError> {
    if windows.is_empty() {
        return Err(InferError::Context(format!("no context windows for new item `{name}`")));
    }
    if catalog.len() != model.n_items() {
        return Err(InferError::Config("catalog and model disagree on the item count".into()));
    }
    let vector = f.infer(model, windows)?;
    let idx = catalog.push_item(name)?;
    let mut out = model.clone();
    let got = out.append_item(&vector)?;
    debug_assert_eq!(idx, got);
    Ok((InferredEmbedding { item: idx, vector, provenance: Provenance::Inferred }, out))
}

/// `item,provenance,v0,...` rows for external plotting.
pub fn write_embeddings_csv<W: std::io::Write>(
    w: W,
    model: &RecModel,
    catalog: &Catalog,
    provenance: &[Provenance],
) -> Result<(), InferError> {
    let io = |e: csv::Error| InferError::Data(DataError::Io { path: "<embedding export>".into(), reason: e.to_string() });
    let mut wr = csv::Writer::from_writer(w);
    let d = model.config().dim;
    let mut header = vec!["index".to_string(), "item".to_string(), "provenance".to_string()];
    header.extend((0..d).map(|j| format!("e{j}")));
    wr.write_record(&header).map_err(io)?;
    for i in 0..model.n_items() {
        let p = provenance.get(i).copied().unwrap_or(Provenance::Original);
        let mut rec = vec![
            i.to_string(),
            catalog.item_of(i).unwrap_or("").to_string(),
            (if p == Provenance::Inferred { "inferred" } else { "original" }).to_string(),
        ];
        rec.extend(model.item_embedding(i)?.iter().map(|v| format!("{v:e}")));
        wr.write_record(&rec).map_err(io)?;
    }
    wr.flush().map_err(|e| InferError::Data(DataError::Io { path: "<embedding export>".into(), reason: e.to_string() }))
}

/// Mean over `items` of the Euclidean distance to the nearest head
/// embedding (excluding the item itself).
pub fn mean_nearest_head_distance(model: &RecModel, items: &[usize], partition: &PopularityPartition) -> f64 {
    let heads: Vec<&[f64]> = partition.head_items().into_iter().filter_map(|h| model.item_embedding(h).ok()).collect();
    let mut total = 0.0;
    for &i in items {
        let e = model.item_embedding(i).expect("valid item");
        let best = heads
            .iter()
            .filter(|h| !std::ptr::eq(h.as_ptr(), e.as_ptr()))
            .map(|h| h.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        total += best.sqrt();
    }
    total / items.len().max(1) as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = kernels::dot(a, a).sqrt();
    let nb = kernels::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    kernels::dot(a, b) / (na * nb)
}

#[cfg(test)]
mod tests;
