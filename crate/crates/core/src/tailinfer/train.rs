use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aggregate_var, interpret_var, usable, InferError, InferenceFunction, InferenceConfig};
use crate::dataset::{ContextSet, ContextWindow};
use crate::model::layers::Pass;
use crate::model::{ModelError, RecModel};
use crate::numerics::{AdamConfig, AdamState, Gradients, ParamSet, Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean squared distance to the targets after each epoch, measured on
    /// one fixed draw of contexts per target.
    pub curve: Vec<f64>,
    /// Mean squared distance over each epoch's own training draws.
    pub train_curve: Vec<f64>,
    pub targets: Vec<usize>,
    /// Requested targets without a usable window.
    pub skipped: Vec<usize>,
}

const GRAD_CHUNK: usize = 4;

/// One target with the windows it can be reproduced from.
struct Target<'a> {
    item: usize,
    windows: Vec<&'a ContextWindow>,
    /// Interpreter outputs, present when the interpreter is frozen.
    cached: Option<Vec<Vec<f64>>>,
    embedding: Tensor,
}

/// Fit the inference function so that aggregating a few windows of each
/// target reproduces its trained embedding. Only `agg.*` (and `enc.*` when
/// not frozen) change; the model is read-only.
pub fn train_inference_function(
    model: &RecModel,
    sets: &BTreeMap<usize, ContextSet>,
    targets: &[usize],
    cfg: &InferenceConfig,
) -> Result<(InferenceFunction, TrainReport), InferError> {
    let f = InferenceFunction::init(model, cfg)?;
    let mcfg = f.model_config.clone();
    let mut full = f.joined(model)?;

    let mut skipped = Vec::new();
    let mut data: Vec<Target<'_>> = Vec::new();
    for &item in targets {
        let windows: Vec<&ContextWindow> = match sets.get(&item) {
            Some(s) => s.windows.iter().filter(|w| usable(&mcfg, w)).collect(),
            None => Vec::new(),
        };
        if windows.is_empty() {
            skipped.push(item);
            continue;
        }
        let embedding = Tensor::row(model.item_embedding(item)?.to_vec());
        data.push(Target { item, windows, cached: None, embedding });
    }
    if !skipped.is_empty() {
        log::warn!("{} target items have no usable context and are skipped", skipped.len());
    }
    if data.is_empty() {
        return Err(InferError::Training("no target item has a usable context window".into()));
    }

    if cfg.phi_alpha_frozen {
        let n = model.n_items();
        let full_ref = &full;
        data.par_iter_mut().try_for_each(|t| -> Result<(), InferError> {
            let reprs = t
                .windows
                .iter()
                .map(|w| {
                    let mut tape = Tape::new();
                    let v = interpret_var(&mut tape, full_ref, &mcfg, n, w)?;
                    Ok(tape.value(v).data().to_vec())
                })
                .collect::<Result<Vec<_>, InferError>>()?;
            t.cached = Some(reprs);
            Ok(())
        })?;
    }

    let adam_cfg = AdamConfig {
        peak_lr: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps,
        l2_coefficient: cfg.l2,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &full);
    let probe = draw(&data, (0..data.len()).collect(), cfg, &mut rng::derive(cfg.seed, &[rng::stream::INFER_TRAIN, u64::MAX]));
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut train_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = rng::derive(cfg.seed, &[rng::stream::INFER_TRAIN, epoch as u64, 0]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut r);
        let plan = draw(&data, order, cfg, &mut r);
        let mut total = 0.0;
        for (b, batch) in plan.chunks(cfg.batch_size).enumerate() {
            let (loss, mut grads) = batch_gradient(&full, &f, model.n_items(), &data, batch, epoch, b * cfg.batch_size)?;
            if !loss.is_finite() {
                return Err(InferError::Training(format!("non-finite loss at epoch {epoch}")));
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut full, &grads).map_err(|e| InferError::Training(e.to_string()))?;
            total += loss;
        }
        let probe_mean = probe_distance(&full, &f, model.n_items(), &data, &probe)?;
        log::info!("inference epoch {epoch}: mean squared distance {probe_mean:.5}");
        train_curve.push(total / plan.len() as f64);
        curve.push(probe_mean);
    }

    let mut params = full.subset("enc.");
    params.merge(&full.subset("agg."));
    params.set_trainable_prefix("enc.", !cfg.phi_alpha_frozen);
    let report = TrainReport { curve, train_curve, targets: data.iter().map(|t| t.item).collect(), skipped };
    Ok((InferenceFunction { params, ..f }, report))
}

/// `(target, chosen windows)` for each target in `order`: κ uniform in
/// `1..=min(K, kappa_max)`, or every window (up to the cap) without few-shot
/// sampling.
fn draw(data: &[Target<'_>], order: Vec<usize>, cfg: &InferenceConfig, r: &mut rng::Rng) -> Vec<(usize, Vec<usize>)> {
    order
        .into_iter()
        .map(|t| {
            let k = data[t].windows.len();
            let kappa = if cfg.few_shot { r.gen_range(1..=k.min(cfg.kappa_max)) } else { k.min(cfg.context_batch_cap) };
            (t, rand::seq::index::sample(r, k, kappa).into_vec())
        })
        .collect()
}

fn probe_distance(
    full: &ParamSet,
    f: &InferenceFunction,
    n_items: usize,
    data: &[Target<'_>],
    probe: &[(usize, Vec<usize>)],
) -> Result<f64, InferError> {
    let per: Vec<f64> = probe
        .par_iter()
        .map(|(t, picks)| {
            let target = &data[*t];
            let mut tape = Tape::new();
            let x = window_rows(&mut tape, full, f, n_items, target, picks)?;
            let mut r = rng::derive(0, &[]);
            let out = aggregate_var(&mut tape, full, &f.config, x, &mut Pass { training: false, rng: &mut r })?;
            let e = tape.constant(target.embedding.clone());
            let l = tape.sq_dist(out, e).map_err(ModelError::from)?;
            Ok(tape.value(l).item())
        })
        .collect::<Result<_, InferError>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn batch_gradient(
    full: &ParamSet,
    f: &InferenceFunction,
    n_items: usize,
    data: &[Target<'_>],
    batch: &[(usize, Vec<usize>)],
    epoch: usize,
    first_index: usize,
) -> Result<(f64, Gradients), InferError> {
    let partial: Vec<(f64, Gradients)> = batch
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = Gradients::empty(full.len());
            let mut loss = 0.0;
            for (j, (t, picks)) in chunk.iter().enumerate() {
                let idx = first_index + c * GRAD_CHUNK + j;
                let target = &data[*t];
                let mut tape = Tape::new();
                let x = window_rows(&mut tape, full, f, n_items, target, picks)?;
                let mut r = rng::derive(f.config.seed, &[rng::stream::INFER_TRAIN, epoch as u64, 1 + idx as u64]);
                let out = aggregate_var(&mut tape, full, &f.config, x, &mut Pass { training: true, rng: &mut r })?;
                let e = tape.constant(target.embedding.clone());
                let l = tape.sq_dist(out, e).map_err(ModelError::from)?;
                loss += tape.value(l).item();
                acc.accumulate(&tape.backward(l, full).map_err(ModelError::from)?);
            }
            Ok((loss, acc))
        })
        .collect::<Result<_, InferError>>()?;
    let mut total = Gradients::empty(full.len());
    let mut loss = 0.0;
    for (l, g) in partial {
        loss += l;
        total.accumulate(&g);
    }
    Ok((loss, total))
}

/// Interpreter outputs for the chosen windows, as a `κ×d` variable.
fn window_rows(
    tape: &mut Tape,
    full: &ParamSet,
    f: &InferenceFunction,
    n_items: usize,
    target: &Target<'_>,
    picks: &[usize],
) -> Result<Var, InferError> {
    if let Some(cache) = &target.cached {
        let rows: Vec<Vec<f64>> = picks.iter().map(|&p| cache[p].clone()).collect();
        return Ok(tape.constant(Tensor::from_rows(&rows).map_err(ModelError::from)?));
    }
    let vars = picks
        .iter()
        .map(|&p| interpret_var(tape, full, &f.model_config, n_items, target.windows[p]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tape.concat_rows(&vars).map_err(ModelError::from)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub mean_cosine: f64,
    pub mean_sq_dist: f64,
    pub items: usize,
}

/// How well `min(κ, K)` randomly drawn windows reproduce the trained
/// embeddings of `items` (items without a usable window are left out).
pub fn reproduction_quality(
    f: &InferenceFunction,
    model: &RecModel,
    sets: &BTreeMap<usize, ContextSet>,
    items: &[usize],
    kappa: usize,
    seed: u64,
) -> Result<Quality, InferError> {
    let full = f.joined(model)?;
    let cfg = &f.model_config;
    let per_item: Vec<Option<(f64, f64)>> = items
        .par_iter()
        .map(|&item| {
            let Some(set) = sets.get(&item) else { return Ok(None) };
            let ws: Vec<&ContextWindow> = set.windows.iter().filter(|w| usable(cfg, w)).collect();
            if ws.is_empty() {
                return Ok(None);
            }
            let mut r = rng::derive(seed, &[rng::stream::SUBSAMPLE, item as u64, kappa as u64]);
            let picks = rand::seq::index::sample(&mut r, ws.len(), kappa.clamp(1, ws.len()));
            let mut tape = Tape::new();
            let vars = picks
                .iter()
                .map(|p| interpret_var(&mut tape, &full, cfg, model.n_items(), ws[p]))
                .collect::<Result<Vec<_>, _>>()?;
            let x = tape.concat_rows(&vars).map_err(ModelError::from)?;
            let mut r0 = rng::derive(0, &[]);
            let out = aggregate_var(&mut tape, &full, &f.config, x, &mut Pass { training: false, rng: &mut r0 })?;
            let v = tape.value(out).data();
            let e = model.item_embedding(item)?;
            let sq: f64 = v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(Some((super::cosine(v, e), sq)))
        })
        .collect::<Result<_, InferError>>()?;
    let got: Vec<(f64, f64)> = per_item.into_iter().flatten().collect();
    let n = got.len().max(1) as f64;
    Ok(Quality {
        mean_cosine: got.iter().map(|g| g.0).sum::<f64>() / n,
        mean_sq_dist: got.iter().map(|g| g.1).sum::<f64>() / n,
        items: got.len(),
    })
}
