//! Differentiation graph: an append-only tape of op records.
//!
//! Nodes are pushed in execution order, so node ids are already a topological
//! order. Gradients are built from the same ops that build the forward pass,
//! which is what makes a gradient itself differentiable when the backward
//! pass is asked to create a graph.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Const,
    Add(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    Powf(usize, T),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    Relu(usize),
    MatMul(usize, usize),
    TransposeLast(usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    SumTo(usize),
    BroadcastTo(usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>),
    GatherLast(usize, Rc<[usize]>),
    ScatterLast(usize, Rc<[usize]>),
}

impl<T> Op<T> {
    pub(crate) fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf | Const => [None, None],
            Add(a, b) | Mul(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Neg(a) | Scale(a, _) | AddScalar(a) | Powf(a, _) | Exp(a) | Log(a) | Tanh(a) | Sin(a) | Cos(a) | Relu(a)
            | TransposeLast(a) | Permute(a, _) | Reshape(a) | SumTo(a) | BroadcastTo(a)
            | GatherRows(a, _) | ScatterAddRows(a, _) | GatherLast(a, _) | ScatterLast(a, _) => {
                [Some(a), None]
            }
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Rc<Tensor<T>>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

pub(crate) struct Tape<T: Scalar> {
    pub(crate) id: u64,
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) no_grad: usize,
    pub(crate) released: bool,
}

/// Handle to a differentiation graph. Cloning shares the same graph.
pub struct Graph<T: Scalar> {
    pub(crate) tape: Rc<RefCell<Tape<T>>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph { tape: Rc::clone(&self.tape) }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A value node inside a [`Graph`].
pub struct Var<T: Scalar> {
    pub(crate) graph: Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var { graph: self.graph.clone(), id: self.id }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("graph", &self.graph.id())
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Restores gradient recording when dropped. See [`Graph::no_grad`].
pub struct NoGradGuard<T: Scalar> {
    graph: Graph<T>,
}

impl<T: Scalar> Drop for NoGradGuard<T> {
    fn drop(&mut self) {
        self.graph.tape.borrow_mut().no_grad -= 1;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            tape: Rc::new(RefCell::new(Tape {
                id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
                nodes: Vec::new(),
                no_grad: 0,
                released: false,
            })),
        }
    }

    pub fn id(&self) -> u64 {
        self.tape.borrow().id
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_released(&self) -> bool {
        self.tape.borrow().released
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn param(&self, value: Tensor<T>) -> Var<T> {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.push_raw(value, Op::Const, false)
    }

    pub fn scalar(&self, v: T) -> Var<T> {
        self.constant(Tensor::scalar(v))
    }

    /// While the guard lives, new nodes are recorded as constants.
    pub fn no_grad(&self) -> NoGradGuard<T> {
        self.tape.borrow_mut().no_grad += 1;
        NoGradGuard { graph: self.clone() }
    }

    pub fn is_recording(&self) -> bool {
        self.tape.borrow().no_grad == 0
    }

    pub(crate) fn same(&self, other: &Graph<T>) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<T> {
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self.clone(), id: tape.nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.borrow().nodes[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.tape.borrow().nodes[id].requires_grad
    }

    /// Records an op result. Non-finite results are rejected.
    pub(crate) fn push_op(&self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var<T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let tape = self.tape.borrow();
            tape.no_grad == 0
                && op
                    .parents()
                    .iter()
                    .flatten()
                    .any(|&p| tape.nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Const };
        Ok(self.push_raw(value, op, requires_grad))
    }
}

impl<T: Scalar> Var<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    fn check_same(&self, other: &Var<T>) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(Error::ForeignGraph)
        }
    }

    fn unary(&self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var<T>> {
        self.graph.push_op(name, value, op)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<T> {
        self.graph.constant((*self.value()).clone())
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.check_same(other)?;
        let v = self.value().zip_with(&other.value(), "add", |a, b| a + b)?;
        self.graph.push_op("add", v, Op::Add(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.check_same(other)?;
        let v = self.value().zip_with(&other.value(), "mul", |a, b| a * b)?;
        self.graph.push_op("mul", v, Op::Mul(self.id, other.id))
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.unary("neg", self.value().map(|x| -x), Op::Neg(self.id))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.add(&other.neg()?)
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: T) -> Result<Var<T>> {
        self.unary("scale", self.value().map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: T) -> Result<Var<T>> {
        self.unary("add_scalar", self.value().map(|x| x + c), Op::AddScalar(self.id))
    }

    pub fn powf(&self, p: T) -> Result<Var<T>> {
        self.unary("powf", self.value().map(|x| x.powf(p)), Op::Powf(self.id, p))
    }

    pub fn exp(&self) -> Result<Var<T>> {
        self.unary("exp", self.value().map(T::exp), Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<T>> {
        self.unary("log", self.value().map(T::ln), Op::Log(self.id))
    }

    pub fn sin(&self) -> Result<Var<T>> {
        self.unary("sin", self.value().map(T::sin), Op::Sin(self.id))
    }

    pub fn cos(&self) -> Result<Var<T>> {
        self.unary("cos", self.value().map(T::cos), Op::Cos(self.id))
    }

    pub fn tanh(&self) -> Result<Var<T>> {
        self.unary("tanh", self.value().map(T::tanh), Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Result<Var<T>> {
        let z = T::zero();
        self.unary("relu", self.value().map(|x| if x > z { x } else { z }), Op::Relu(self.id))
    }

    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.check_same(other)?;
        let v = self.value().matmul(&other.value())?;
        self.graph.push_op("matmul", v, Op::MatMul(self.id, other.id))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<T>> {
        let v = self.value().transpose_last()?;
        self.unary("transpose", v, Op::TransposeLast(self.id))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let v = self.value().permute(axes)?;
        self.unary("permute", v, Op::Permute(self.id, axes.to_vec()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let v = self.value().reshape(shape)?;
        self.unary("reshape", v, Op::Reshape(self.id))
    }

    /// Sums broadcast axes away so the result has shape `target`.
    pub fn sum_to(&self, target: &[usize]) -> Result<Var<T>> {
        if self.value().shape() == target {
            return Ok(self.clone());
        }
        let v = self.value().sum_to(target)?;
        self.unary("sum_to", v, Op::SumTo(self.id))
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Result<Var<T>> {
        if self.value().shape() == target {
            return Ok(self.clone());
        }
        let v = self.value().broadcast_to(target)?;
        self.unary("broadcast_to", v, Op::BroadcastTo(self.id))
    }

    /// Row lookup into a 2-D table (embedding).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<T>> {
        let v = self.value().gather_rows(idx)?;
        self.unary("gather_rows", v, Op::GatherRows(self.id, idx.into()))
    }

    pub fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Result<Var<T>> {
        let v = self.value().scatter_add_rows(idx, rows)?;
        self.unary("scatter_add_rows", v, Op::ScatterAddRows(self.id, idx.into()))
    }

    /// Selects `k` entries per row along the last axis.
    pub fn gather_last(&self, idx: &[usize], k: usize) -> Result<Var<T>> {
        let v = self.value().gather_last(idx, k)?;
        self.unary("gather_last", v, Op::GatherLast(self.id, idx.into()))
    }

    pub fn scatter_last(&self, idx: &[usize], width: usize) -> Result<Var<T>> {
        let v = self.value().scatter_last(idx, width)?;
        self.unary("scatter_last", v, Op::ScatterLast(self.id, idx.into()))
    }
}
