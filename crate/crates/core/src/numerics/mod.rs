//! Dense `f64` tensors, a reverse-mode autodiff tape and Adam with warmup.

mod adam;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::{Gradients, Param, ParamId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(NumericError::Shape(format!(
            "matmul: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

/// Softmax along `axis`, stabilized by max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, NumericError> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(NumericError::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[at(j)];
            }
            kernels::softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[at(j)] = *b;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor, NumericError> {
    let cols = x.cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(NumericError::Shape(format!(
            "layer_norm: gain/bias length {}/{} for width {cols}",
            gain.len(),
            bias.len()
        )));
    }
    let (mut y, _) = kernels::layer_norm_rows(x.data(), cols, eps);
    for row in y.chunks_mut(cols) {
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// Exact GELU, `x·Φ(x)`, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| kernels::gelu(*v)).collect())
}

/// Inverted dropout; identity at inference.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, training: bool, rng: &mut R) -> Result<Tensor, NumericError> {
    tape::check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - rate);
    let data = x.data().iter().map(|v| if rng.gen::<f64>() < rate { 0.0 } else { v * keep }).collect();
    Tensor::new(x.shape().to_vec(), data)
}
