use serde::{Deserialize, Serialize};

use super::NumericError;

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericError> {
        if shape.iter().any(|&s| s == 0) {
            return Err(NumericError::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self { shape: vec![1, data.len()], data }
    }

    /// Build a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericError> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericError::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols()
        }
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Append rows to a 2-D tensor.
    pub fn push_row(&mut self, row: &[f64]) -> Result<(), NumericError> {
        if self.shape.len() != 2 || row.len() != self.shape[1] {
            return Err(NumericError::Shape(format!(
                "cannot append row of length {} to {:?}",
                row.len(),
                self.shape
            )));
        }
        self.data.extend_from_slice(row);
        self.shape[0] += 1;
        Ok(())
    }

    /// Insert a row before index `at` in a 2-D tensor.
    pub fn insert_row(&mut self, at: usize, row: &[f64]) -> Result<(), NumericError> {
        if self.shape.len() != 2 || row.len() != self.shape[1] || at > self.shape[0] {
            return Err(NumericError::Shape(format!(
                "cannot insert row of length {} at {at} into {:?}",
                row.len(),
                self.shape
            )));
        }
        let c = self.shape[1];
        self.data.splice(at * c..at * c, row.iter().copied());
        self.shape[0] += 1;
        Ok(())
    }

    /// Append a value to a 1-D tensor.
    pub fn push(&mut self, value: f64) -> Result<(), NumericError> {
        if self.shape.len() != 1 {
            return Err(NumericError::Shape(format!("push on non-vector {:?}", self.shape)));
        }
        self.data.push(value);
        self.shape[0] += 1;
        Ok(())
    }
}
