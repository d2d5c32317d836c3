//! Dense row-major tensors and the numeric kernels behind graph ops.
//!
//! Broadcasting follows trailing-dimension alignment: shapes are aligned at
//! their last axis, and each aligned pair of extents must be equal or one of
//! them must be `1`. Missing leading axes behave as extent `1`.

use std::fmt;

use crate::error::{Error, Result};
use crate::memory;
use crate::scalar::Scalar;

pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl<T: Scalar> Drop for Tensor<T> {
    fn drop(&mut self) {
        memory::on_free(self.data.len() * T::BYTES);
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Output shape of broadcasting `a` against `b`, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `src` laid out inside `out` (zero along broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < off || src[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, src_index)` for every element of `out`.
fn for_each_broadcast(out: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(out);
    if out.is_empty() {
        f(0, 0);
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for o in 0..n {
        f(o, src);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        memory::on_alloc(data.len() * T::BYTES);
        Tensor { shape, data }
    }

    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {} elements, got {}", numel(shape), data.len()),
            });
        }
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "extents must be positive".into(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&x| T::of(x)).collect(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(Vec::new(), vec![v])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(mut self) -> Vec<T> {
        memory::on_free(self.data.len() * T::BYTES);
        std::mem::take(&mut self.data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Elementwise binary op with trailing-dimension broadcasting.
    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self::from_parts(self.shape.clone(), data));
        }
        let out = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })?;
        let n = numel(&out);
        // Fast paths: one side is a trailing suffix of the output.
        if out == self.shape && self.shape.ends_with(&other.shape) {
            let m = other.data.len();
            let data = (0..n).map(|i| f(self.data[i], other.data[i % m])).collect();
            return Ok(Self::from_parts(out, data));
        }
        if out == other.shape && other.shape.ends_with(&self.shape) {
            let m = self.data.len();
            let data = (0..n).map(|i| f(self.data[i % m], other.data[i])).collect();
            return Ok(Self::from_parts(out, data));
        }
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let mut ia = Vec::with_capacity(n);
        for_each_broadcast(&out, &sa, |_, s| ia.push(s));
        let mut data = Vec::with_capacity(n);
        let mut k = 0;
        for_each_broadcast(&out, &sb, |_, s| {
            data.push(f(self.data[ia[k]], other.data[s]));
            k += 1;
        });
        Ok(Self::from_parts(out, data))
    }

    /// Sums over broadcast axes so the result has shape `target`.
    pub fn sum_to(&self, target: &[usize]) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let compatible = broadcast_shape(target, &self.shape).map(|s| s == self.shape).unwrap_or(false);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "sum_to",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let m = numel(target);
        let mut out = vec![T::zero(); m];
        if self.shape.ends_with(target) {
            for (i, &x) in self.data.iter().enumerate() {
                out[i % m] += x;
            }
        } else if target.len() == self.shape.len()
            && target.last() == Some(&1)
            && target[..target.len() - 1] == self.shape[..self.shape.len() - 1]
        {
            let w = *self.shape.last().unwrap();
            for (o, row) in out.iter_mut().zip(self.data.chunks(w)) {
                *o = row.iter().fold(T::zero(), |acc, &x| acc + x);
            }
        } else {
            let st = broadcast_strides(target, &self.shape);
            for_each_broadcast(&self.shape, &st, |i, t| out[t] += self.data[i]);
        }
        Ok(Self::from_parts(target.to_vec(), out))
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let compatible = broadcast_shape(&self.shape, target).map(|s| s == target).unwrap_or(false);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let n = numel(target);
        let mut data = Vec::with_capacity(n);
        if target.ends_with(&self.shape) {
            let m = self.data.len();
            data.extend((0..n).map(|i| self.data[i % m]));
        } else {
            let st = broadcast_strides(&self.shape, target);
            for_each_broadcast(target, &st, |_, s| data.push(self.data[s]));
        }
        Ok(Self::from_parts(target.to_vec(), data))
    }

    /// Batched matrix product over the last two axes.
    ///
    /// Accepts `[.., m, k] x [k, n]`, `[m, k] x [.., k, n]`, and equal batch
    /// prefixes `[.., m, k] x [.., k, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.ndim() < 2 || other.ndim() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.shape[self.ndim() - 2], self.shape[self.ndim() - 1]);
        let (k2, n) = (other.shape[other.ndim() - 2], other.shape[other.ndim() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        if other.ndim() == 2 {
            let rows = self.numel() / k;
            let mut out = vec![T::zero(); rows * n];
            gemm_acc(&self.data, &other.data, &mut out, rows, k, n);
            let mut shape = self.shape.clone();
            *shape.last_mut().unwrap() = n;
            return Ok(Self::from_parts(shape, out));
        }
        let batch_b = &other.shape[..other.ndim() - 2];
        let nb = numel(batch_b);
        if self.ndim() == 2 {
            let mut out = vec![T::zero(); nb * m * n];
            for b in 0..nb {
                gemm_acc(
                    &self.data,
                    &other.data[b * k * n..(b + 1) * k * n],
                    &mut out[b * m * n..(b + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = batch_b.to_vec();
            shape.extend([m, n]);
            return Ok(Self::from_parts(shape, out));
        }
        if &self.shape[..self.ndim() - 2] != batch_b {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); nb * m * n];
        for b in 0..nb {
            gemm_acc(
                &self.data[b * m * k..(b + 1) * m * k],
                &other.data[b * k * n..(b + 1) * k * n],
                &mut out[b * m * n..(b + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch_b.to_vec();
        shape.extend([m, n]);
        Ok(Self::from_parts(shape, out))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Self> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose needs at least two axes".into(),
            });
        }
        let (r, c) = (self.shape[nd - 2], self.shape[nd - 1]);
        let nb = self.numel() / (r * c);
        let mut out = Vec::with_capacity(self.numel());
        for b in 0..nb {
            let base = b * r * c;
            for j in 0..c {
                for i in 0..r {
                    out.push(self.data[base + i * c + j]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(nd - 2, nd - 1);
        Ok(Self::from_parts(shape, out))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("bad permutation {axes:?}"),
            });
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        for_each_broadcast(&out_shape, &src_strides, |_, s| out.push(self.data[s]));
        Ok(Self::from_parts(out_shape, out))
    }

    /// Selects rows of a 2-D table: `[rows, d] -> [idx.len(), d]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "gather_rows expects a 2-D table".into(),
            });
        }
        let (rows, d) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, extent: rows });
            }
            out.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        Ok(Self::from_parts(vec![idx.len(), d], out))
    }

    /// Adjoint of [`gather_rows`](Self::gather_rows): `[n, d] -> [rows, d]`.
    pub fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Result<Self> {
        if self.ndim() != 2 || self.shape[0] != idx.len() {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("scatter_add_rows expects [{}, d]", idx.len()),
            });
        }
        let d = self.shape[1];
        let mut out = vec![T::zero(); rows * d];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, extent: rows });
            }
            for j in 0..d {
                out[i * d + j] += self.data[r * d + j];
            }
        }
        Ok(Self::from_parts(vec![rows, d], out))
    }

    /// Picks `k` entries per row along the last axis; `idx` holds `rows * k`
    /// column indices.
    pub fn gather_last(&self, idx: &[usize], k: usize) -> Result<Self> {
        let w = *self.shape.last().ok_or_else(|| Error::InvalidShape {
            shape: self.shape.clone(),
            reason: "gather_last needs at least one axis".into(),
        })?;
        let rows = self.numel() / w;
        if idx.len() != rows * k {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("expected {} indices, got {}", rows * k, idx.len()),
            });
        }
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            for &c in &idx[r * k..(r + 1) * k] {
                if c >= w {
                    return Err(Error::IndexOutOfRange { index: c, extent: w });
                }
                out.push(self.data[r * w + c]);
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = k;
        Ok(Self::from_parts(shape, out))
    }

    /// Adjoint of [`gather_last`](Self::gather_last): scatters `[.., k]` into
    /// `[.., width]`, accumulating repeated indices.
    pub fn scatter_last(&self, idx: &[usize], width: usize) -> Result<Self> {
        let k = *self.shape.last().unwrap_or(&1);
        let rows = self.numel() / k;
        if idx.len() != rows * k {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("expected {} indices, got {}", rows * k, idx.len()),
            });
        }
        let mut out = vec![T::zero(); rows * width];
        for r in 0..rows {
            for j in 0..k {
                let c = idx[r * k + j];
                if c >= width {
                    return Err(Error::IndexOutOfRange { index: c, extent: width });
                }
                out[r * width + c] += self.data[r * k + j];
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = width;
        Ok(Self::from_parts(shape, out))
    }

    /// Row-wise maximum over the last axis, keeping the axis with extent 1.
    pub fn max_last(&self) -> Self {
        let w = *self.shape.last().unwrap_or(&1);
        let data: Vec<T> = self
            .data
            .chunks(w)
            .map(|row| row.iter().fold(T::neg_infinity(), |m, &x| m.max(x)))
            .collect();
        let mut shape = self.shape.clone();
        if let Some(l) = shape.last_mut() {
            *l = 1;
        }
        Self::from_parts(shape, data)
    }

    /// Converts element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|x| U::of(x.as_f64())).collect())
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`, all row-major.
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = t(&[1., 2., 3., 4.], &[2, 2]);
        let b = t(&[1., 1.], &[2, 1]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn broadcast_rule_is_trailing_aligned() {
        assert_eq!(broadcast_shape(&[4, 3, 2], &[3, 1]), Some(vec![4, 3, 2]));
        assert_eq!(broadcast_shape(&[2, 1, 5], &[3, 1]), Some(vec![2, 3, 5]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
    }

    #[test]
    fn general_broadcast_and_sum_to_are_adjoint() {
        let a = t(&[1., 2.], &[2, 1]);
        let b = t(&[10., 20., 30.], &[3]);
        let c = a.zip_with(&b, "add", |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11., 21., 31., 12., 22., 32.]);
        assert_eq!(c.sum_to(&[2, 1]).unwrap().data(), &[63., 66.]);
        assert_eq!(c.sum_to(&[3]).unwrap().data(), &[23., 43., 63.]);
        assert_eq!(c.sum_to(&[]).unwrap().data(), &[129.]);
        let bt = a.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(bt.data(), &[1., 1., 1., 2., 2., 2.]);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let a = t(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 3, 4]);
        let p = a.permute(&[0, 2, 1]).unwrap();
        assert_eq!(p, a.transpose_last().unwrap());
        let q = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(q.shape(), &[4, 2, 3]);
        // q[i, j, l] = a[j, l, i]
        assert_eq!(q.data()[6 + 3 + 2], a.data()[12 + 2 * 4 + 1]);
    }

    #[test]
    fn batched_matmul_shapes() {
        let a = t(&[1.; 12], &[2, 2, 3]);
        let b = t(&[1.; 6], &[3, 2]);
        assert_eq!(a.matmul(&b).unwrap().shape(), &[2, 2, 2]);
        let bb = t(&[1.; 12], &[2, 3, 2]);
        let c = a.matmul(&bb).unwrap();
        assert_eq!(c.data(), &[3.; 8]);
        let bad = t(&[1.; 12], &[4, 3, 1]);
        assert!(a.matmul(&bad).is_err());
    }

    #[test]
    fn gather_scatter_last() {
        let a = t(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
        let g = a.gather_last(&[2, 0, 1, 1], 2).unwrap();
        assert_eq!(g.data(), &[3., 1., 5., 5.]);
        let s = g.scatter_last(&[2, 0, 1, 1], 3).unwrap();
        assert_eq!(s.data(), &[1., 0., 3., 0., 10., 0.]);
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(Tensor::<f64>::new(vec![], &[0, 2]).is_err());
        assert!(Tensor::<f64>::new(vec![1.0], &[2]).is_err());
    }
}
