//! Dense row-major tensors in batch x channels x height x width layout.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.len() > 4 {
            return Err(Error::InvalidArgument(format!("tensor rank {} exceeds 4", dims.len())));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: dims,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Samples entries from N(0, std^2).
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_fn(dims, |_| normal.sample(rng))
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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
        self.dims.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_grad",
                lhs: self.dims.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let mut out = Self::new(dims.to_vec(), self.data.clone())?;
        out.requires_grad = self.requires_grad;
        Ok(out)
    }

    /// Dimensions as (n, c, h, w); errors unless the tensor has rank 4.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::InvalidArgument(format!(
                "expected rank-4 NCHW tensor, got dims {other:?}"
            ))),
        }
    }

    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cs, hs, ws) = (self.dims[0], self.dims[1], self.dims[2], self.dims[3]);
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extracts sample `n` of a batch as a tensor with leading extent 1.
    pub fn sample(&self, n: usize) -> Result<Self> {
        let batch = *self
            .dims
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot index a scalar tensor".into()))?;
        if n >= batch {
            return Err(Error::InvalidArgument(format!(
                "sample index {n} out of range for batch {batch}"
            )));
        }
        let stride = self.data.len() / batch;
        let mut dims = self.dims.clone();
        dims[0] = 1;
        Self::new(dims, self.data[n * stride..(n + 1) * stride].to_vec())
    }

    /// Stacks equally-shaped tensors with leading extent 1 along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.dims.clone(),
                    rhs: t.dims.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = first.dims.clone();
        if dims.is_empty() {
            dims.push(items.len());
        } else {
            dims[0] *= items.len();
        }
        Self::new(dims, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn grad_shape_is_checked() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn sample_and_stack_are_inverse() {
        let t = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f64);
        let parts: Vec<_> = (0..3).map(|n| t.sample(n).unwrap()).collect();
        assert_eq!(Tensor::stack(&parts).unwrap().data(), t.data());
    }
}
