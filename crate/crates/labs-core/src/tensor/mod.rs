//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records eagerly-evaluated operations into a linear graph;
//! [`Tape::backward`] replays it in reverse to accumulate adjoints for every
//! leaf created with `requires_grad = true`. Single-threaded by design so
//! that identical inputs produce bitwise-identical values and gradients.

mod checkpoint;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use tape::{lstm_cell, Gradients, LstmWeightVars, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Log arguments are clamped to at least this before taking `ln`.
pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects {expected}, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of bounds for size {bound}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
}

/// Row-major dense tensor of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Build a rank-2 tensor from rows. All rows must share a length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let m = rows.len();
        let q = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * q);
        for r in rows {
            if r.len() != q {
                return Err(TensorError::LengthMismatch {
                    len: r.len(),
                    shape: vec![m, q],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![m, q],
            data,
        })
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element (i, j) of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Rows of a rank-2 tensor as vectors.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data.chunks(cols).map(|c| c.to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { len: 3, .. }));
    }

    #[test]
    fn numel_matches_shape_product() {
        let t = Tensor::zeros(vec![3, 4]);
        assert_eq!(t.numel(), 12);
        assert_eq!(t.shape(), &[3, 4]);
    }

    #[test]
    fn matrix_rejects_ragged_rows() {
        assert!(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}
