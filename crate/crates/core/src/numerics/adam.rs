use serde::{Deserialize, Serialize};

use super::{Gradients, NumericError, ParamSet};

/// Optimizer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub peak_lr: f64,
    /// Length of the linear ramp; 0 disables warmup.
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Coefficient of the `l2·param` gradient penalty.
    pub l2_coefficient: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2_coefficient: 1e-4,
        }
    }
}

impl AdamConfig {
    /// Linear warmup to `peak_lr`, constant afterwards.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.peak_lr;
        }
        self.peak_lr * (t as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Adam moments plus step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let first: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { config, t: 0, second: first.clone(), first }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.second[i]
    }

    /// One update of every trainable parameter. The learning rate used is
    /// `lr_at(t)` with `t` the number of completed steps, so the very first
    /// step moves nothing when warmup is on. Non-finite gradients abort the
    /// step before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<(), NumericError> {
        if !grads.is_finite() {
            return Err(NumericError::NonFinite(format!("gradient at optimizer step {}", self.t)));
        }
        if self.first.len() != params.len() {
            return Err(NumericError::Shape(format!(
                "optimizer tracks {} parameters, set has {}",
                self.first.len(),
                params.len()
            )));
        }
        let c = &self.config;
        let lr = c.lr_at(self.t);
        let step = (self.t + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(step);
        let bc2 = 1.0 - c.beta2.powi(step);
        for i in 0..params.len() {
            let id = super::ParamId(i);
            if !params.get(id).trainable {
                continue;
            }
            let param = params.get_mut(id);
            if param.value.len() != self.first[i].len() {
                return Err(NumericError::Shape(format!("moment shape mismatch for {}", param.name)));
            }
            let cols = param.value.cols();
            let mut g: Vec<f64> = match grads.get(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; param.value.len()],
            };
            for (gv, pv) in g.iter_mut().zip(param.value.data()) {
                *gv += c.l2_coefficient * pv;
            }
            for &r in &param.frozen_rows {
                g[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, gv), mv), vv) in param.value.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *p -= lr * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
        self.t += 1;
        Ok(())
    }
}
