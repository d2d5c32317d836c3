//! Named parameter tensors and their binding into a graph.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use vbpt_autodiff::{GradVector, Graph, Layout, ParamSet, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Ordered name → tensor map. Order is insertion order and defines the
/// flat layout used by gradients and optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.tensors.push(t);
    }

    /// Normal(0, std) initialised tensor.
    pub fn push_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        self.push(name, Tensor::new(data, shape).expect("shape matches data"));
    }

    pub fn push_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) {
        self.push(name, Tensor::full(shape, T::of(v)));
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn layout(&self) -> Arc<Layout> {
        Layout::new(self.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())))
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.numel())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Adds `c * v` in place, where `v` is laid out like this store.
    pub fn axpy(&mut self, c: T, v: &GradVector<T>) -> Result<()> {
        if v.len() != self.numel() {
            return Err(Error::Shape("update does not match parameter layout".into()));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x += c * v.entries()[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (n, t) in self.iter() {
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in t.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Puts every tensor in `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Bound<T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { names: self.names.clone(), vars, layout: self.layout() }
    }

    /// Binds as leaves only the parameters accepted by `trainable`.
    pub fn bind_some(&self, g: &Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound<T> {
        let vars = self
            .iter()
            .map(|(n, t)| if trainable(n) { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { names: self.names.clone(), vars, layout: self.layout() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Parameters of a [`ParamStore`] living in one graph.
#[derive(Clone)]
pub struct Bound<T: Scalar> {
    names: Vec<String>,
    vars: Vec<Var<T>>,
    layout: Arc<Layout>,
}

impl<T: Scalar> Bound<T> {
    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.vars[i])
            .ok_or_else(|| Error::Autodiff(vbpt_autodiff::Error::ParamAbsent(name.to_string())))
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Parameter set over all parameters, in store order.
    pub fn param_set(&self) -> ParamSet<T> {
        self.subset(|_| true)
    }

    /// Parameter set over the accepted names, in store order.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParamSet<T> {
        ParamSet::new(
            self.names
                .iter()
                .zip(&self.vars)
                .filter(|(n, _)| keep(n))
                .map(|(n, v)| (n.clone(), v.clone()))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_round_trip_and_checksum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::<f64>::new();
        p.push_normal("a", &[2, 3], 1.0, &mut rng);
        p.push_full("b", &[4], 0.5);
        let flat = p.to_flat();
        let sum = p.checksum();
        let mut q = p.clone();
        q.set_flat(&[0.0; 10]).unwrap();
        assert_ne!(q.checksum(), sum);
        q.set_flat(&flat).unwrap();
        assert_eq!(q.checksum(), sum);
        assert_eq!(p.layout().total(), 10);
    }
}
