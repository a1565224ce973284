//! Dense row-major tensors.
//!
//! A [`Tensor`] is plain data: a shape, a flat `Vec<f64>` in row-major order,
//! and a `requires_grad` flag that tells the tape whether to track it when it
//! is registered. The handle into an active tape is the separate
//! [`crate::tape::Var`] returned by [`crate::tape::Tape::watch`].

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor from a shape and row-major values.
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::Contract(format!(
                "tensor of shape {shape:?} needs {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![0.0; numel]).expect("zeros: positive shape")
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], values: vec![v], requires_grad: false }
    }

    /// Fill from a uniform draw in [lo, hi), consuming `numel` draws in
    /// row-major order.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut RngState) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Self::from_vec(shape, values).expect("uniform: positive shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows/cols of a 2-D tensor; errors out for other ranks.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape { op, detail: format!("expected 2-D tensor, got {:?}", self.shape) }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Element at (row, col) of a 2-D tensor. Panics on rank/bounds misuse;
    /// this is an internal indexing helper, not a user-facing contract.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[row * self.shape[1] + col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
        assert!(Tensor::from_vec(vec![], vec![]).is_err());
    }

    #[test]
    fn uniform_draws_in_order() {
        let mut a = RngState::seed_from_u64(1);
        let mut b = RngState::seed_from_u64(1);
        let t = Tensor::uniform(vec![2, 2], -1.0, 1.0, &mut a);
        let expect: Vec<f64> = (0..4).map(|_| b.uniform(-1.0, 1.0)).collect();
        assert_eq!(t.values(), expect.as_slice());
    }
}
