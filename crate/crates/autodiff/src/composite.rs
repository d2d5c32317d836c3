//! Ops built from primitives. Their gradients (and gradients of gradients)
//! come for free from the primitives' adjoints.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::graph::Var;
use crate::tensor::Tensor;

impl<T: Scalar> Var<T> {
    pub fn sum(&self) -> Result<Var<T>> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let n = self.value().numel();
        self.sum()?.scale(T::one() / T::of(n as f64))
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last(&self) -> Result<Var<T>> {
        let mut shape = self.shape();
        match shape.last_mut() {
            Some(l) => *l = 1,
            None => return Ok(self.clone()),
        }
        self.sum_to(&shape)
    }

    pub fn mean_last(&self) -> Result<Var<T>> {
        let w = *self.shape().last().unwrap_or(&1);
        self.sum_last()?.scale(T::one() / T::of(w as f64))
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        self.mul(&other.powf(-T::one())?)
    }

    pub fn square(&self) -> Result<Var<T>> {
        self.mul(self)
    }

    pub fn sigmoid(&self) -> Result<Var<T>> {
        let half = T::of(0.5);
        self.scale(half)?.tanh()?.scale(half)?.add_scalar(half)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<T>> {
        let shift = self.graph.constant(self.value().max_last());
        let e = self.sub(&shift)?.exp()?;
        e.div(&e.sum_last()?)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<T>> {
        let shift = self.graph.constant(self.value().max_last());
        let z = self.sub(&shift)?;
        z.sub(&z.exp()?.sum_last()?.log()?)
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<T>, bias: &Var<T>, eps: f64) -> Result<Var<T>> {
        let centered = self.sub(&self.mean_last()?)?;
        let var = centered.square()?.mean_last()?;
        let inv = var.add_scalar(T::of(eps))?.powf(T::of(-0.5))?;
        centered.mul(&inv)?.mul(gain)?.add(bias)
    }

    /// Mean over rows of `-sum_j target[r, j] * log_softmax(self)[r, j]`.
    ///
    /// `target` rows are probability distributions over the last axis.
    pub fn cross_entropy(&self, target: &Var<T>) -> Result<Var<T>> {
        if self.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape(),
                rhs: target.shape(),
            });
        }
        self.log_softmax()?.mul(target)?.sum_last()?.mean()?.neg()
    }

    /// Mean squared error.
    pub fn mse(&self, target: &Var<T>) -> Result<Var<T>> {
        if self.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.shape(),
                rhs: target.shape(),
            });
        }
        self.sub(target)?.square()?.mean()
    }

    /// Full inner product of two same-shaped nodes.
    pub fn dot(&self, other: &Var<T>) -> Result<Var<T>> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        self.mul(other)?.sum()
    }

    /// Inner product with a constant tensor.
    pub fn dot_const(&self, other: &Tensor<T>) -> Result<Var<T>> {
        let c = self.graph.constant(other.clone());
        self.dot(&c)
    }
}

/// Softmax over the last axis of a plain tensor.
pub fn softmax_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let w = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(w) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(out, x.shape()).expect("same shape")
}
