//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is plain row-major storage; [`Graph`] is a define-by-run tape
//! rebuilt per forward pass. Gradient correctness is guarded by the
//! finite-difference harness in [`check`].

mod check;
mod graph;

pub use check::{finite_diff_check, finite_diff_check_sampled};
pub use graph::{Graph, NodeId};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense multi-dimensional array, row-major, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} elements, data has {}",
                dims,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(dims: Vec<usize>, value: f64) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// iid N(0, std^2) entries from the given rng.
    pub fn randn<R: Rng>(dims: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = dims.iter().product();
        let mut data = vec![0.0; numel];
        for v in data.iter_mut() {
            *v = crate::rng::standard_normal(rng) * std;
        }
        Tensor {
            dims,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value at a multi-index; panics on rank mismatch (test/debug helper).
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.dims.len());
        let mut flat = 0;
        for (d, (&i, &n)) in idx.iter().zip(self.dims.iter()).enumerate() {
            assert!(i < n, "index {i} out of range {n} at axis {d}");
            flat = flat * n + i;
        }
        self.data[flat]
    }

    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({})",
                self.dims,
                self.data.len(),
                dims,
                numel
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_extent_dims_are_allowed() {
        let t = Tensor::new(vec![0, 4], vec![]).unwrap();
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
    }
}
