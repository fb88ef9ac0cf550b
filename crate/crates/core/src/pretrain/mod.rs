//! End-to-end training of the recommender: masked-item prediction for the
//! transformer, next-item prediction for the GRU, both with a full-softmax
//! negative log-likelihood, Adam with warmup and selection of the epoch
//! with the best validation MRR.

mod examples;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LeaveOneOutSplit, PopularityPartition};
use crate::eval::{evaluate, EvalCase, EvalError};
use crate::model::layers::{self, Pass};
use crate::model::{encoder_hidden, ModelConfig, ModelError, RecModel, Variant};
use crate::numerics::{kernels, AdamConfig, AdamState, Gradients, NumericError, ParamSet, Tape, Var};
use crate::rng;

pub use examples::{
    make_masked_examples, make_next_item_examples, mask_window, pack_next_item_examples, windows, TrainingExample,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PretrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence { epoch: usize, step: u64, reason: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub l2: f64,
    pub mask_probability: f64,
    /// Stride between training windows of long histories; `None` means the
    /// window length (non-overlapping).
    pub window_stride: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            warmup_steps: 100,
            l2: 1e-4,
            mask_probability: 0.2,
            window_stride: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        let err = |m: String| Err(PretrainError::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.mask_probability > 0.0 && self.mask_probability < 1.0) {
            return err(format!("mask_probability {} outside (0, 1)", self.mask_probability));
        }
        if !(self.learning_rate >= 0.0) || !(self.l2 >= 0.0) {
            return err("learning_rate and l2 must be non-negative".into());
        }
        if self.window_stride == Some(0) {
            return err("window_stride must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            peak_lr: self.learning_rate,
            warmup_steps: self.warmup_steps,
            l2_coefficient: self.l2,
            ..AdamConfig::default()
        }
    }
}

/// `−log softmax(scores)[truth]` over the full vocabulary.
pub fn nll_loss(scores: &[f64], truth: usize) -> f64 {
    kernels::log_sum_exp(scores) - scores[truth]
}

/// Summed NLL of one example's targets on a fresh tape.
pub fn example_loss(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    n_items: usize,
    ex: &TrainingExample,
    pass: &mut Pass<'_>,
) -> Result<Var, ModelError> {
    let (_, hidden) = encoder_hidden(tape, params, cfg, n_items, &ex.input, cfg.total_len(), pass)?;
    let (rows, items): (Vec<usize>, Vec<usize>) = ex.targets.iter().copied().unzip();
    let picked = tape.gather_rows(hidden, &rows)?;
    let states = match cfg.variant {
        Variant::Transformer => layers::output_head(tape, params, picked)?,
        Variant::Gru => picked,
    };
    let scores = layers::score_rows(tape, params, n_items, states)?;
    Ok(tape.nll_rows(scores, &items)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_hr5: f64,
    pub val_hr10: f64,
    pub val_mrr: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainState {
    pub epochs_done: usize,
    pub params: ParamSet,
    pub adam: AdamState,
    pub best_epoch: Option<usize>,
    pub best_mrr: f64,
    pub best_params: Option<ParamSet>,
    pub metrics: Vec<EpochMetrics>,
}

pub struct Pretrainer {
    model_config: ModelConfig,
    n_items: usize,
    cfg: PretrainConfig,
    state: PretrainState,
}

/// Per-example gradients are summed in fixed-size chunks, in order, so the
/// result does not depend on thread scheduling.
const GRAD_CHUNK: usize = 16;

impl Pretrainer {
    pub fn new(model: RecModel, cfg: PretrainConfig) -> Result<Self, PretrainError> {
        cfg.validate()?;
        let adam = AdamState::new(cfg.adam(), &model.params);
        let (model_config, n_items) = (model.config().clone(), model.n_items());
        let state = PretrainState {
            epochs_done: 0,
            params: model.params,
            adam,
            best_epoch: None,
            best_mrr: f64::NEG_INFINITY,
            best_params: None,
            metrics: Vec::new(),
        };
        Ok(Self { model_config, n_items, cfg, state })
    }

    pub fn resume(
        model_config: ModelConfig,
        n_items: usize,
        cfg: PretrainConfig,
        state: PretrainState,
    ) -> Result<Self, PretrainError> {
        cfg.validate()?;
        RecModel::from_params(model_config.clone(), n_items, state.params.clone())?;
        Ok(Self { model_config, n_items, cfg, state })
    }

    pub fn state(&self) -> &PretrainState {
        &self.state
    }

    pub fn current_model(&self) -> RecModel {
        RecModel::from_params(self.model_config.clone(), self.n_items, self.state.params.clone())
            .expect("shapes checked at construction")
    }

    /// The selected model: best validation MRR so far, or the current
    /// parameters if no epoch has run.
    pub fn best_model(&self) -> RecModel {
        let params = self.state.best_params.clone().unwrap_or_else(|| self.state.params.clone());
        RecModel::from_params(self.model_config.clone(), self.n_items, params).expect("shapes checked at construction")
    }

    fn epoch_examples(&self, split: &LeaveOneOutSplit, epoch: usize) -> Vec<TrainingExample> {
        let cfg = &self.model_config;
        let mut r = rng::derive(self.cfg.seed, &[rng::stream::PRETRAIN_EPOCH, epoch as u64, 0]);
        let mut ex = match cfg.variant {
            Variant::Transformer => {
                let stride = self.cfg.window_stride.unwrap_or(cfg.max_len);
                make_masked_examples(split, cfg.max_len, stride, self.cfg.mask_probability, &mut r)
            }
            Variant::Gru => pack_next_item_examples(split, cfg.max_len),
        };
        ex.shuffle(&mut r);
        ex
    }

    /// Gradient of the summed loss over `batch`, plus loss and target count.
    fn batch_gradient(
        &self,
        batch: &[TrainingExample],
        epoch: usize,
        first_index: usize,
    ) -> Result<(f64, usize, Gradients), ModelError> {
        let params = &self.state.params;
        let partial: Vec<(f64, usize, Gradients)> = batch
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut acc = Gradients::empty(params.len());
                let (mut loss, mut n) = (0.0, 0);
                for (j, ex) in chunk.iter().enumerate() {
                    let idx = first_index + c * GRAD_CHUNK + j;
                    let mut r = rng::derive(self.cfg.seed, &[rng::stream::PRETRAIN_EPOCH, epoch as u64, 1 + idx as u64]);
                    let mut pass = Pass { training: true, rng: &mut r };
                    let mut tape = Tape::new();
                    let l = example_loss(&mut tape, params, &self.model_config, self.n_items, ex, &mut pass)?;
                    loss += tape.value(l).item();
                    n += ex.targets.len();
                    acc.accumulate(&tape.backward(l, params)?);
                }
                Ok((loss, n, acc))
            })
            .collect::<Result<_, ModelError>>()?;
        let mut total = Gradients::empty(params.len());
        let (mut loss, mut n) = (0.0, 0);
        for (l, k, g) in partial {
            loss += l;
            n += k;
            total.accumulate(&g);
        }
        Ok((loss, n, total))
    }

    /// One pass over the training examples followed by validation.
    pub fn run_epoch(&mut self, split: &LeaveOneOutSplit, val_cases: &[EvalCase]) -> Result<EpochMetrics, PretrainError> {
        let epoch = self.state.epochs_done;
        let examples = self.epoch_examples(split, epoch);
        let (mut loss_sum, mut target_sum) = (0.0, 0usize);
        for (b, batch) in examples.chunks(self.cfg.batch_size).enumerate() {
            let step = self.state.adam.t;
            let diverged = |reason: String| PretrainError::Divergence { epoch, step, reason };
            let (loss, n, mut grads) = self.batch_gradient(batch, epoch, b * self.cfg.batch_size)?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}")));
            }
            grads.scale(1.0 / n.max(1) as f64);
            self.state.adam.step(&mut self.state.params, &grads).map_err(|e: NumericError| diverged(e.to_string()))?;
            loss_sum += loss;
            target_sum += n;
        }
        let model = self.current_model();
        let (report, _) = evaluate(&model, val_cases, &PopularityPartition::all_head(self.n_items))?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / target_sum.max(1) as f64,
            val_hr5: report.all.hr5,
            val_hr10: report.all.hr10,
            val_mrr: report.all.mrr,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val hr10 {:.4} mrr {:.4}",
            m.train_loss,
            m.val_hr10,
            m.val_mrr
        );
        if m.val_mrr > self.state.best_mrr {
            self.state.best_mrr = m.val_mrr;
            self.state.best_epoch = Some(epoch);
            self.state.best_params = Some(self.state.params.clone());
        }
        self.state.metrics.push(m.clone());
        self.state.epochs_done += 1;
        Ok(m)
    }
}

/// Train for `cfg.epochs` epochs and return the selected model with the
/// per-epoch metrics. `on_epoch` sees each epoch's metrics and the state
/// (for logging and resumable snapshots).
pub fn pretrain(
    model: RecModel,
    split: &LeaveOneOutSplit,
    val_cases: &[EvalCase],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &PretrainState),
) -> Result<(RecModel, Vec<EpochMetrics>), PretrainError> {
    if split.is_empty() {
        return Err(PretrainError::Config("empty split".into()));
    }
    let mut t = Pretrainer::new(model, cfg.clone())?;
    while t.state.epochs_done < cfg.epochs {
        let m = t.run_epoch(split, val_cases)?;
        on_epoch(&m, &t.state);
    }
    Ok((t.best_model(), t.state.metrics.clone()))
}
