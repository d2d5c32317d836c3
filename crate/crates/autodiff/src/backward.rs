//! Reverse sweep.
//!
//! Each op's adjoint is written with graph ops, so with `create_graph` the
//! gradient nodes stay differentiable (double backward). Without it the sweep
//! runs under [`Graph::no_grad`] and its nodes are plain constants.

use crate::error::{Error, Result};
use crate::grad_vector::{GradVector, ParamSet};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradOptions {
    /// Record the backward pass so the returned gradients can be differentiated.
    pub create_graph: bool,
    /// Keep the graph usable for another backward pass. Implied by `create_graph`.
    pub retain: bool,
    /// Return `None` instead of erroring for inputs the loss does not depend on.
    pub allow_unused: bool,
}

impl GradOptions {
    pub fn create_graph() -> Self {
        GradOptions { create_graph: true, retain: true, allow_unused: false }
    }

    pub fn retain() -> Self {
        GradOptions { create_graph: false, retain: true, allow_unused: false }
    }

    pub fn allow_unused(mut self) -> Self {
        self.allow_unused = true;
        self
    }
}

fn var<T: Scalar>(g: &Graph<T>, id: usize) -> Var<T> {
    Var { graph: g.clone(), id }
}

impl<T: Scalar> Graph<T> {
    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// An entry is `None` only when `allow_unused` is set and the loss does
    /// not depend on that input.
    pub fn grad(&self, loss: &Var<T>, wrt: &[&Var<T>], opts: GradOptions) -> Result<Vec<Option<Var<T>>>> {
        if !self.same(&loss.graph) || wrt.iter().any(|w| !self.same(&w.graph)) {
            return Err(Error::ForeignGraph);
        }
        if self.is_released() {
            return Err(Error::GraphReleased);
        }
        let loss_val = loss.value();
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let n = loss.id + 1;

        // reaches[i]: node i is one of `wrt` or depends on one of them.
        let mut reaches = vec![false; n];
        for w in wrt {
            if w.id < n {
                reaches[w.id] = true;
            }
        }
        let ops: Vec<(Op<T>, bool)> = {
            let tape = self.tape.borrow();
            tape.nodes[..n].iter().map(|nd| (nd.op.clone(), nd.requires_grad)).collect()
        };
        for i in 0..n {
            if !reaches[i] && ops[i].1 {
                reaches[i] = ops[i].0.parents().iter().flatten().any(|&p| reaches[p]);
            }
        }

        let _guard = if opts.create_graph { None } else { Some(self.no_grad()) };
        let mut grads: Vec<Option<Var<T>>> = vec![None; n];
        grads[loss.id] = Some(self.constant(Tensor::ones(loss_val.shape())));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let (op, requires_grad) = &ops[i];
            if !requires_grad || !reaches[i] {
                grads[i] = Some(g);
                continue;
            }
            for (p, contrib) in self.vjp(i, op, &g, &reaches)? {
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
            grads[i] = Some(g);
        }
        drop(_guard);

        if !(opts.retain || opts.create_graph) {
            self.tape.borrow_mut().released = true;
        }

        let mut out = Vec::with_capacity(wrt.len());
        for (k, w) in wrt.iter().enumerate() {
            let g = if w.id < n && ops[w.id].1 { grads[w.id].clone() } else { None };
            match g {
                Some(g) => out.push(Some(g)),
                None if opts.allow_unused => out.push(None),
                None => return Err(Error::ParamAbsent(format!("#{k} (node {})", w.id))),
            }
        }
        Ok(out)
    }

    /// Adjoint contributions of node `i` to its parents.
    fn vjp(&self, i: usize, op: &Op<T>, g: &Var<T>, reaches: &[bool]) -> Result<Vec<(usize, Var<T>)>> {
        let mut out = Vec::with_capacity(2);
        let want = |p: usize| reaches[p];
        let shape_of = |p: usize| self.value_of(p).shape().to_vec();
        match op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                if want(*a) {
                    out.push((*a, g.sum_to(&shape_of(*a))?));
                }
                if want(*b) {
                    out.push((*b, g.sum_to(&shape_of(*b))?));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    out.push((*a, g.mul(&var(self, *b))?.sum_to(&shape_of(*a))?));
                }
                if want(*b) {
                    out.push((*b, g.mul(&var(self, *a))?.sum_to(&shape_of(*b))?));
                }
            }
            Op::Neg(a) => out.push((*a, g.neg()?)),
            Op::Scale(a, c) => out.push((*a, g.scale(*c)?)),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::Powf(a, p) => {
                let d = var(self, *a).powf(*p - T::one())?.scale(*p)?;
                out.push((*a, g.mul(&d)?));
            }
            Op::Exp(a) => out.push((*a, g.mul(&var(self, i))?)),
            Op::Log(a) => out.push((*a, g.mul(&var(self, *a).powf(-T::one())?)?)),
            Op::Tanh(a) => {
                let y = var(self, i);
                let d = y.square()?.neg()?.add_scalar(T::one())?;
                out.push((*a, g.mul(&d)?));
            }
            Op::Sin(a) => out.push((*a, g.mul(&var(self, *a).cos()?)?)),
            Op::Cos(a) => out.push((*a, g.mul(&var(self, *a).sin()?.neg()?)?)),
            Op::Relu(a) => {
                let mask = self.value_of(*a).map(|x| if x > T::zero() { T::one() } else { T::zero() });
                out.push((*a, g.mul(&self.constant(mask))?));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (var(self, *a), var(self, *b));
                if want(*a) {
                    let ga = g.matmul(&vb.transpose()?)?;
                    out.push((*a, ga.sum_to(&shape_of(*a))?));
                }
                if want(*b) {
                    let sa = shape_of(*a);
                    let sb = shape_of(*b);
                    let gb = if sb.len() == 2 && sa.len() > 2 {
                        // Shared weight: fold the batch axes into rows.
                        let k = sa[sa.len() - 1];
                        let n = sb[1];
                        let a2 = va.reshape(&[sa.iter().product::<usize>() / k, k])?;
                        let g2 = g.reshape(&[g.value().numel() / n, n])?;
                        a2.transpose()?.matmul(&g2)?
                    } else {
                        va.transpose()?.matmul(g)?.sum_to(&sb)?
                    };
                    out.push((*b, gb));
                }
            }
            Op::TransposeLast(a) => out.push((*a, g.transpose()?)),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                out.push((*a, g.permute(&inv)?));
            }
            Op::Reshape(a) => out.push((*a, g.reshape(&shape_of(*a))?)),
            Op::SumTo(a) => out.push((*a, g.broadcast_to(&shape_of(*a))?)),
            Op::BroadcastTo(a) => out.push((*a, g.sum_to(&shape_of(*a))?)),
            Op::GatherRows(a, idx) => {
                let rows = shape_of(*a)[0];
                out.push((*a, g.scatter_add_rows(idx, rows)?));
            }
            Op::ScatterAddRows(a, idx) => out.push((*a, g.gather_rows(idx)?)),
            Op::GatherLast(a, idx) => {
                let w = *shape_of(*a).last().unwrap();
                out.push((*a, g.scatter_last(idx, w)?));
            }
            Op::ScatterLast(a, idx) => {
                let k = *shape_of(*a).last().unwrap();
                out.push((*a, g.gather_last(idx, k)?));
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` over a named parameter set, flattened.
    ///
    /// With `retain = false` the graph is released and any further backward
    /// pass on it fails with [`Error::GraphReleased`].
    pub fn backward(&self, loss: &Var<T>, wrt: &ParamSet<T>, retain: bool) -> Result<GradVector<T>> {
        let vars: Vec<&Var<T>> = wrt.vars().collect();
        let opts = GradOptions { create_graph: false, retain, allow_unused: false };
        let grads = self.grad(loss, &vars, opts).map_err(|e| match e {
            Error::ParamAbsent(s) => Error::ParamAbsent(name_from(wrt, &s)),
            e => e,
        })?;
        let tensors: Vec<Tensor<T>> = grads
            .into_iter()
            .map(|g| (*g.expect("allow_unused is off").value()).clone())
            .collect();
        GradVector::from_tensors(wrt.layout(), &tensors)
    }

    /// Hessian-vector product `∇²loss · v` by differentiating `<∇loss, v>`.
    pub fn hvp(&self, loss: &Var<T>, wrt: &ParamSet<T>, v: &GradVector<T>) -> Result<GradVector<T>> {
        if v.layout() != wrt.layout() {
            return Err(Error::LayoutMismatch("direction layout differs from parameter set".into()));
        }
        let vars: Vec<&Var<T>> = wrt.vars().collect();
        let grads = self.grad(loss, &vars, GradOptions::create_graph())?;
        let mut dot: Option<Var<T>> = None;
        for (k, g) in grads.iter().enumerate() {
            let term = g.as_ref().expect("allow_unused is off").dot_const(&v.block_tensor(k)?)?;
            dot = Some(match dot {
                Some(d) => d.add(&term)?,
                None => term,
            });
        }
        let dot = dot.ok_or_else(|| Error::LayoutMismatch("empty parameter set".into()))?;
        let second = self.grad(&dot, &vars, GradOptions::retain().allow_unused())?;
        let tensors: Vec<Tensor<T>> = second
            .into_iter()
            .zip(wrt.layout().entries())
            .map(|(g, e)| match g {
                Some(g) => (*g.value()).clone(),
                None => Tensor::zeros(&e.shape),
            })
            .collect();
        GradVector::from_tensors(wrt.layout(), &tensors)
    }
}

fn name_from<T: Scalar>(set: &ParamSet<T>, msg: &str) -> String {
    msg.strip_prefix('#')
        .and_then(|s| s.split_whitespace().next())
        .and_then(|k| k.parse::<usize>().ok())
        .and_then(|k| set.layout().entries().get(k).map(|e| e.name.clone()))
        .unwrap_or_else(|| msg.to_string())
}
