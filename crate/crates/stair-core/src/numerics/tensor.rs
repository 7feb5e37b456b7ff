//! Immutable row-major tensor values.

use super::{NumericsError, NumericsResult};
use crate::scalar::Scalar;

/// Dense row-major tensor. Data length always equals the product of the
/// shape; rank 0 is a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> NumericsResult<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NumericsError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); n] }
    }

    pub fn from_vec(data: Vec<S>) -> NumericsResult<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn from_rows(rows: &[Vec<S>]) -> NumericsResult<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "Tensor::from_rows",
                    detail: format!("ragged rows: {} vs {}", row.len(), c),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Tensor { shape: vec![n, n], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Element accessor for rank-2 tensors.
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.shape[1] + c]
    }

    /// The single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1, "item() on multi-element tensor");
        self.data[0]
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> NumericsResult<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }

    /// In-crate constructor that skips the finiteness scan (used for
    /// gradient buffers known to be finite by construction).
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let r = Tensor::new(vec![2, 2], vec![1.0_f64, 2.0, 3.0]);
        assert!(matches!(r, Err(NumericsError::ShapeMismatch { .. })));
    }

    #[test]
    fn new_rejects_non_finite() {
        let r = Tensor::new(vec![2], vec![1.0_f64, f64::NAN]);
        assert!(matches!(r, Err(NumericsError::NonFinite { .. })));
        let r = Tensor::new(vec![1], vec![f64::INFINITY]);
        assert!(matches!(r, Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn scalar_rank_zero() {
        let t = Tensor::scalar(3.5_f64);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.item(), 3.5);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn eye_and_at() {
        let i = Tensor::<f64>::eye(3);
        assert_eq!(i.at(0, 0), 1.0);
        assert_eq!(i.at(0, 1), 0.0);
        assert_eq!(i.at(2, 2), 1.0);
    }

    #[test]
    fn works_for_f32_too() {
        let t = Tensor::<f32>::from_vec(vec![1.0, 2.0]).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0]);
    }
}
