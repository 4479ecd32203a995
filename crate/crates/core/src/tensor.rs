//! Dense row-major arrays.
//!
//! [`DenseArray`] is the only tensor type in the lab: a shape vector plus a
//! flat row-major buffer. Rank is arbitrary in principle, but the graph
//! primitives only ever produce rank-1 vectors and rank-2 matrices; a leading
//! batch axis is the sole broadcast dimension. Values are checked to be
//! finite when an array is built from outside data, so NaN/Inf can only enter
//! a computation through arithmetic — which the graph evaluator traps with a
//! per-node guard.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but buffer holds {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at flat index {index} during array construction")]
    NonFinite { index: usize },
}

/// Shape plus row-major data buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> DenseArray<S> {
    /// Builds an array from a shape and buffer, validating element count and
    /// finiteness of every value.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for op outputs whose finiteness the evaluator
    /// checks separately.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    /// Rank-1 scalar wrapper (shape `[1]`).
    pub fn scalar(value: S) -> Result<Self, TensorError> {
        Self::new(vec![1], vec![value])
    }

    /// Rank-1 vector.
    pub fn vector(data: Vec<S>) -> Result<Self, TensorError> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Rank-2 matrix from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows when viewed as a matrix: rank-2 arrays report their
    /// leading extent, rank-1 arrays count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows() on rank-{r} array"),
        }
    }

    /// Trailing extent: vector length or matrix column count.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Element of a rank-2 array.
    pub fn at(&self, row: usize, col: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: S) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[row * cols + col] = value;
    }

    /// Row slice of a rank-2 array.
    pub fn row(&self, row: usize) -> &[S] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Matrix transpose (rank-2 only). Used by backward passes; not a graph
    /// primitive.
    pub(crate) fn transpose2(&self) -> Self {
        assert_eq!(self.rank(), 2, "transpose2 on rank-{}", self.rank());
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Exact elementwise equality (same shape, `==` on every value).
    pub fn value_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a == b)
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<S> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| (a - b).abs())
                .fold(S::zero(), S::max),
        )
    }
}
