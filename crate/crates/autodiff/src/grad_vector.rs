//! Flat gradient vectors with a named block layout.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, contiguous, non-overlapping blocks covering a flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    pub fn new<S: Into<String>>(blocks: impl IntoIterator<Item = (S, Vec<usize>)>) -> Arc<Layout> {
        let mut offset = 0;
        let entries = blocks
            .into_iter()
            .map(|(name, shape)| {
                let len = numel(&shape);
                let e = LayoutEntry { name: name.into(), shape, offset, len };
                offset += len;
                e
            })
            .collect();
        Arc::new(Layout { entries, total: offset })
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Sub-layout with the named blocks, in this layout's order, repacked.
    pub fn select(&self, keep: impl Fn(&str) -> bool) -> Arc<Layout> {
        Layout::new(
            self.entries
                .iter()
                .filter(|e| keep(&e.name))
                .map(|e| (e.name.clone(), e.shape.clone())),
        )
    }
}

/// Parameters of one graph, keyed by name, in layout order.
pub struct ParamSet<T: Scalar> {
    layout: Arc<Layout>,
    vars: Vec<Var<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(named: Vec<(String, Var<T>)>) -> Self {
        let layout = Layout::new(named.iter().map(|(n, v)| (n.clone(), v.shape())));
        ParamSet { layout, vars: named.into_iter().map(|(_, v)| v).collect() }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var<T>> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var<T>> {
        self.layout.index_of(name).map(|i| &self.vars[i])
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradVector<T: Scalar> {
    entries: Vec<T>,
    layout: Arc<Layout>,
}

impl<T: Scalar> GradVector<T> {
    pub fn new(layout: Arc<Layout>, entries: Vec<T>) -> Result<Self> {
        if entries.len() != layout.total() {
            return Err(Error::LayoutMismatch(format!(
                "layout covers {} entries, got {}",
                layout.total(),
                entries.len()
            )));
        }
        Ok(GradVector { entries, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total();
        GradVector { entries: vec![T::zero(); n], layout }
    }

    pub fn from_tensors(layout: &Arc<Layout>, tensors: &[Tensor<T>]) -> Result<Self> {
        if tensors.len() != layout.entries().len() {
            return Err(Error::LayoutMismatch(format!(
                "{} blocks for a layout of {}",
                tensors.len(),
                layout.entries().len()
            )));
        }
        let mut entries = Vec::with_capacity(layout.total());
        for (t, e) in tensors.iter().zip(layout.entries()) {
            if t.numel() != e.len {
                return Err(Error::LayoutMismatch(format!("block `{}` has {} entries, expected {}", e.name, t.numel(), e.len)));
            }
            entries.extend_from_slice(t.data());
        }
        Ok(GradVector { entries, layout: Arc::clone(layout) })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [T] {
        &mut self.entries
    }

    pub fn into_entries(self) -> Vec<T> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|e| &self.entries[e.offset..e.offset + e.len])
    }

    /// Block `k` as a tensor of its recorded shape.
    pub fn block_tensor(&self, k: usize) -> Result<Tensor<T>> {
        let e = &self.layout.entries()[k];
        Tensor::new(self.entries[e.offset..e.offset + e.len].to_vec(), &e.shape)
    }

    fn check(&self, other: &Self) -> Result<()> {
        if self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch("gradient vectors have different layouts".into()))
        }
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check(other)?;
        Ok(self.entries.iter().zip(&other.entries).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.axpy(T::one(), other)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: T, other: &Self) -> Result<Self> {
        self.check(other)?;
        let entries = self.entries.iter().zip(&other.entries).map(|(&a, &b)| a + alpha * b).collect();
        Ok(GradVector { entries, layout: Arc::clone(&self.layout) })
    }

    pub fn scale(&self, c: T) -> Self {
        GradVector { entries: self.entries.iter().map(|&x| x * c).collect(), layout: Arc::clone(&self.layout) }
    }

    pub fn norm(&self) -> T {
        self.entries.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    /// Restriction to the blocks of `sub` (which must be a sub-layout by name).
    pub fn restrict(&self, sub: &Arc<Layout>) -> Result<Self> {
        let mut entries = Vec::with_capacity(sub.total());
        for e in sub.entries() {
            let src = self
                .layout
                .get(&e.name)
                .ok_or_else(|| Error::LayoutMismatch(format!("block `{}` not in source layout", e.name)))?;
            if src.len != e.len {
                return Err(Error::LayoutMismatch(format!("block `{}` size differs", e.name)));
            }
            entries.extend_from_slice(&self.entries[src.offset..src.offset + src.len]);
        }
        Ok(GradVector { entries, layout: Arc::clone(sub) })
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let l = Layout::new([("a", vec![2, 3]), ("b", vec![4]), ("c", vec![1])]);
        let mut next = 0;
        for e in l.entries() {
            assert_eq!(e.offset, next);
            next += e.len;
        }
        assert_eq!(next, l.total());
    }

    #[test]
    fn mismatched_layouts_error() {
        let a = GradVector::<f64>::zeros(Layout::new([("a", vec![2])]));
        let b = GradVector::<f64>::zeros(Layout::new([("b", vec![2])]));
        assert!(matches!(a.dot(&b), Err(Error::LayoutMismatch(_))));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn restrict_picks_named_blocks() {
        let l = Layout::new([("a", vec![2]), ("b", vec![1]), ("c", vec![2])]);
        let g = GradVector::new(l.clone(), vec![1., 2., 3., 4., 5.]).unwrap();
        let sub = l.select(|n| n != "b");
        assert_eq!(g.restrict(&sub).unwrap().entries(), &[1., 2., 4., 5.]);
    }
}
