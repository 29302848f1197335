//! Dense tensors with reverse-mode differentiation.
//!
//! Everything is a flat row-major buffer plus a shape. Differentiation is a
//! recorded tape ([`Tape`]): forward ops append nodes, [`Tape::backward`]
//! replays them in reverse. Two precisions are supported through the
//! [`Real`] trait: f32 for training speed, f64 for gradient checking and
//! oracle tests.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::gradcheck;
pub use tape::{Tape, ValId};

use crate::error::{Error, Result};
use std::fmt;

/// Scalar element type: f32 or f64.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> f32 {
        v
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> f64 {
        v as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast two equal-rank shapes: each axis must match or be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "broadcast",
            format!("rank mismatch: {:?} vs {:?}", a, b),
        ));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::shape(
                    "broadcast",
                    format!("incompatible shapes {:?} vs {:?}", a, b),
                ))
            }
        })
        .collect()
}

/// An n-dimensional array: shape, row-major data, and (for parameters) an
/// optional gradient of the same shape filled in by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} wants {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Option<Vec<T>>) {
        debug_assert!(g.as_ref().map_or(true, |g| g.len() == self.data.len()));
        self.grad = g;
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Max relative difference between two equal-length slices, with the
/// denominator floored at 1e-8 (the gradcheck convention).
pub fn max_rel_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        let denom = (x.abs() + y.abs()).max(1e-8);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::<f64>::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[1, 1, 4], &[3, 2, 4]).unwrap(), vec![3, 2, 4]);
        assert!(broadcast_shape(&[2, 4], &[3, 4]).is_err());
        assert!(broadcast_shape(&[2, 4], &[2, 4, 1]).is_err());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }
}
