//! The three-layer sequential recommender: item embeddings, a GRU or
//! self-attention encoder, and inner-product scoring against the same
//! embedding table.
//!
//! Parameter naming: `emb.*` holds the embedding layer (table, positions,
//! layer norm, per-item bias) and `enc.*` the sequence encoder including the
//! output projection. The table has `n_items + 2` rows; the last two are the
//! padding and `[mask]` rows.

mod checkpoint;
pub mod layers;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericError, ParamSet, Tape, Tensor, Var};
use crate::rng::{self, Rng};

pub use checkpoint::{bytes_hash, file_hash, Checkpoint, CheckpointKind, FORMAT_VERSION};
use layers::{Embedded, Pass};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("item index {index} out of range for {n_items} items")]
    Index { index: usize, n_items: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint was built for catalog {expected}, found {found}")]
    CatalogMismatch { expected: String, found: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gru,
    Transformer,
}

impl std::str::FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gru" => Ok(Variant::Gru),
            "transformer" => Ok(Variant::Transformer),
            other => Err(ModelError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dim: usize,
    /// Maximum number of history items fed to the encoder.
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(Variant::Transformer, 64, 50)
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, dim: usize, max_len: usize) -> Self {
        Self {
            variant,
            dim,
            max_len,
            blocks: 2,
            heads: 2,
            dropout: 0.1,
            init_std: 0.02,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.dim == 0 {
            return err("dim must be positive".into());
        }
        if self.max_len < 2 {
            return err(format!("max_len {} must be at least 2", self.max_len));
        }
        if self.variant == Variant::Transformer {
            if self.blocks == 0 {
                return err("at least one block is required".into());
            }
            if self.heads == 0 || self.dim % self.heads != 0 {
                return err(format!("{} heads do not divide dim {}", self.heads, self.dim));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0) || !(self.ln_eps > 0.0) {
            return err("init_std and ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Slots seen by the encoder: the history plus the appended `[mask]`
    /// for the transformer.
    pub fn total_len(&self) -> usize {
        match self.variant {
            Variant::Gru => self.max_len,
            Variant::Transformer => self.max_len + 1,
        }
    }
}

/// Encoder input symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Item(usize),
    Mask,
}

/// Intermediate states, pad rows reported as zeros so every tensor spans
/// all slots.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderActivations {
    /// `hidden[0..=N]` and `attended[0..N]`.
    Transformer { hidden: Vec<Tensor>, attended: Vec<Tensor> },
    Gru { states: Tensor },
}

/// Truncated normal sampler (bound two standard deviations).
pub(crate) fn trunc_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Insert freshly initialized encoder parameters into `params`: block
/// weights (or GRU gates) plus the output projection. Also used to build
/// an interpreter from scratch.
pub fn init_encoder(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut Rng) {
    let d = cfg.dim;
    let std = cfg.init_std;
    match cfg.variant {
        Variant::Transformer => {
            for b in 0..cfg.blocks {
                init_attention_block(params, &format!("enc.b{b}"), d, std, rng);
            }
            params.insert("enc.out.w", trunc_normal(rng, &[d, d], std));
            params.insert("enc.out.b", Tensor::zeros(&[d]));
        }
        Variant::Gru => {
            params.insert("enc.gru.wx", trunc_normal(rng, &[d, 3 * d], std));
            params.insert("enc.gru.bx", Tensor::zeros(&[3 * d]));
            params.insert("enc.gru.uzr", trunc_normal(rng, &[d, 2 * d], std));
            params.insert("enc.gru.uh", trunc_normal(rng, &[d, d], std));
        }
    }
}

/// Weights for one self-attention block under `prefix`.
pub fn init_attention_block(params: &mut ParamSet, prefix: &str, d: usize, std: f64, rng: &mut Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}.att.{w}"), trunc_normal(rng, &[d, d], std));
        params.insert(format!("{prefix}.att.b{}", &w[1..]), Tensor::zeros(&[d]));
    }
    for ln in ["ln1", "ln2"] {
        params.insert(format!("{prefix}.{ln}.gain"), Tensor::filled(&[d], 1.0));
        params.insert(format!("{prefix}.{ln}.bias"), Tensor::zeros(&[d]));
    }
    params.insert(format!("{prefix}.ff.w1"), trunc_normal(rng, &[d, 4 * d], std));
    params.insert(format!("{prefix}.ff.b1"), Tensor::zeros(&[4 * d]));
    params.insert(format!("{prefix}.ff.w2"), trunc_normal(rng, &[4 * d, d], std));
    params.insert(format!("{prefix}.ff.b2"), Tensor::zeros(&[d]));
}

/// Final hidden rows for the non-pad slots: `H^N` for the transformer, the
/// per-step states for the GRU.
pub fn encoder_hidden(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    n_items: usize,
    tokens: &[Token],
    total_len: usize,
    pass: &mut Pass<'_>,
) -> Result<(Embedded, Var), ModelError> {
    let emb = layers::embed_sequence(tape, params, cfg, n_items, tokens, total_len, pass)?;
    let hidden = match cfg.variant {
        Variant::Transformer => {
            let (_, hs) = layers::transformer_stack(tape, params, cfg, emb.rows, pass)?;
            *hs.last().expect("at least the input")
        }
        Variant::Gru => layers::gru_states(tape, params, emb.rows)?,
    };
    Ok((emb, hidden))
}

/// The user state `m^u` for a history (as a `1×d` tape variable).
pub fn user_state_var(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    n_items: usize,
    history: &[usize],
    pass: &mut Pass<'_>,
) -> Result<Var, ModelError> {
    let tokens = history_tokens(cfg, history);
    let (_, hidden) = encoder_hidden(tape, params, cfg, n_items, &tokens, cfg.total_len(), pass)?;
    let rows = tape.shape(hidden)[0];
    let last = tape.slice_rows(hidden, rows - 1, 1)?;
    match cfg.variant {
        Variant::Transformer => layers::output_head(tape, params, last),
        Variant::Gru => Ok(last),
    }
}

/// Encoder input for a history: its last `max_len` items, followed by
/// `[mask]` for the transformer.
pub fn history_tokens(cfg: &ModelConfig, history: &[usize]) -> Vec<Token> {
    let start = history.len().saturating_sub(cfg.max_len);
    let mut t: Vec<Token> = history[start..].iter().map(|&i| Token::Item(i)).collect();
    if cfg.variant == Variant::Transformer {
        t.push(Token::Mask);
    }
    t
}

/// A pre-trainable recommender bound to a catalog size.
#[derive(Clone, Debug, PartialEq)]
pub struct RecModel {
    config: ModelConfig,
    n_items: usize,
    pub params: ParamSet,
}

impl RecModel {
    pub fn new(config: ModelConfig, n_items: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if n_items == 0 {
            return Err(ModelError::Config("empty catalog".into()));
        }
        let d = config.dim;
        let mut rng = rng::derive(seed, &[rng::stream::INIT]);
        let mut params = ParamSet::new();
        let mut table = trunc_normal(&mut rng, &[n_items + 2, d], config.init_std);
        table.row_slice_mut(n_items).fill(0.0);
        if config.variant == Variant::Gru {
            table.row_slice_mut(n_items + 1).fill(0.0);
        }
        let id = params.insert("emb.items", table);
        params.get_mut(id).frozen_rows = match config.variant {
            Variant::Gru => vec![n_items, n_items + 1],
            Variant::Transformer => vec![n_items],
        };
        params.insert("emb.bias", Tensor::zeros(&[n_items]));
        if config.variant == Variant::Transformer {
            params.insert("emb.pos", trunc_normal(&mut rng, &[config.total_len(), d], config.init_std));
        }
        params.insert("emb.ln.gain", Tensor::filled(&[d], 1.0));
        params.insert("emb.ln.bias", Tensor::zeros(&[d]));
        init_encoder(&config, &mut params, &mut rng);
        Ok(Self { config, n_items, params })
    }

    /// Wrap existing parameters, checking the table covers `n_items`.
    pub fn from_params(config: ModelConfig, n_items: usize, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        let table = params.value("emb.items")?;
        if table.shape() != [n_items + 2, config.dim] {
            return Err(ModelError::Checkpoint(format!(
                "embedding table {:?} does not match {} items of width {}",
                table.shape(),
                n_items,
                config.dim
            )));
        }
        Ok(Self { config, n_items, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn pad_index(&self) -> usize {
        self.n_items
    }

    pub fn mask_index(&self) -> usize {
        self.n_items + 1
    }

    /// Run the encoder on a history in inference mode.
    pub fn user_state(&self, history: &[usize]) -> Result<Vec<f64>, ModelError> {
        if history.is_empty() && self.config.variant == Variant::Gru {
            return Ok(vec![0.0; self.config.dim]);
        }
        let mut tape = Tape::new();
        let mut rng = rng::derive(0, &[]);
        let mut pass = Pass { training: false, rng: &mut rng };
        let m = user_state_var(&mut tape, &self.params, &self.config, self.n_items, history, &mut pass)?;
        Ok(tape.value(m).data().to_vec())
    }

    /// User state plus every intermediate activation for a history.
    pub fn encode(&self, history: &[usize]) -> Result<(Vec<f64>, EncoderActivations), ModelError> {
        let cfg = &self.config;
        let tokens = history_tokens(cfg, history);
        let total = cfg.total_len();
        let mut tape = Tape::new();
        let mut rng = rng::derive(0, &[]);
        let mut pass = Pass { training: false, rng: &mut rng };
        let emb = layers::embed_sequence(&mut tape, &self.params, cfg, self.n_items, &tokens, total, &mut pass)?;
        let padded = |tape: &Tape, v: Var| {
            let mut full = Tensor::zeros(&[total, cfg.dim]);
            full.data_mut()[emb.pad * cfg.dim..].copy_from_slice(tape.value(v).data());
            full
        };
        match cfg.variant {
            Variant::Transformer => {
                let (as_, hs) = layers::transformer_stack(&mut tape, &self.params, cfg, emb.rows, &mut pass)?;
                let last = *hs.last().expect("input row");
                let rows = tape.shape(last)[0];
                let h = tape.slice_rows(last, rows - 1, 1)?;
                let m = layers::output_head(&mut tape, &self.params, h)?;
                let acts = EncoderActivations::Transformer {
                    hidden: hs.iter().map(|&v| padded(&tape, v)).collect(),
                    attended: as_.iter().map(|&v| padded(&tape, v)).collect(),
                };
                Ok((tape.value(m).data().to_vec(), acts))
            }
            Variant::Gru => {
                let states = layers::gru_states(&mut tape, &self.params, emb.rows)?;
                let rows = tape.shape(states)[0];
                let m = tape.value(states).row_slice(rows - 1).to_vec();
                Ok((m, EncoderActivations::Gru { states: padded(&tape, states) }))
            }
        }
    }

    /// Relevance of every real item: `⟨m, e_j⟩ + bias_j`.
    pub fn score(&self, m: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.score_items(m, &(0..self.n_items).collect::<Vec<_>>())
    }

    pub fn score_items(&self, m: &[f64], items: &[usize]) -> Result<Vec<f64>, ModelError> {
        if m.len() != self.config.dim {
            return Err(ModelError::Input(format!("state of width {} for dim {}", m.len(), self.config.dim)));
        }
        let table = self.params.value("emb.items")?;
        let bias = self.params.value("emb.bias")?.data();
        items
            .iter()
            .map(|&j| {
                if j >= self.n_items {
                    return Err(ModelError::Index { index: j, n_items: self.n_items });
                }
                Ok(crate::numerics::kernels::dot(m, table.row_slice(j)) + bias[j])
            })
            .collect()
    }

    pub fn item_embedding(&self, item: usize) -> Result<&[f64], ModelError> {
        if item >= self.n_items {
            return Err(ModelError::Index { index: item, n_items: self.n_items });
        }
        Ok(self.params.value("emb.items")?.row_slice(item))
    }

    /// Overwrite one real item's embedding row.
    pub fn set_item_embedding(&mut self, item: usize, row: &[f64]) -> Result<(), ModelError> {
        if item >= self.n_items {
            return Err(ModelError::Index { index: item, n_items: self.n_items });
        }
        if row.len() != self.config.dim || row.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Input(format!("embedding row must hold {} finite values", self.config.dim)));
        }
        self.params.value_mut("emb.items")?.row_slice_mut(item).copy_from_slice(row);
        Ok(())
    }

    /// Add a new real item with the given embedding and zero bias; returns
    /// its index (the previous item count).
    pub fn append_item(&mut self, row: &[f64]) -> Result<usize, ModelError> {
        if row.len() != self.config.dim || row.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Input(format!("embedding row must hold {} finite values", self.config.dim)));
        }
        let idx = self.n_items;
        let id = self.params.id("emb.items")?;
        let p = self.params.get_mut(id);
        p.value.insert_row(idx, row)?;
        p.frozen_rows.iter_mut().for_each(|r| *r += 1);
        self.params.value_mut("emb.bias")?.push(0.0)?;
        self.n_items += 1;
        Ok(idx)
    }

    /// Draw fresh values for every parameter from `[-1, 1]`, keeping the pad
    /// row at zero. Used by stability checks.
    pub fn randomize_uniform(&mut self, rng: &mut Rng) {
        let pad = self.n_items;
        let d = self.config.dim;
        let ids: Vec<_> = self.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = self.params.get_mut(id);
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..=1.0));
            if p.name == "emb.items" {
                p.value.data_mut()[pad * d..(pad + 1) * d].fill(0.0);
            }
        }
    }
}
