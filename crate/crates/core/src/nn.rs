//! Layers shared by the learner, the designers and the evaluator heads.

use rand::Rng;
use vbpt_autodiff::{Scalar, Tensor, Var};

use crate::error::Result;
use crate::params::{Bound, ParamStore};

/// Large negative additive logit for disallowed attention pairs.
const MASKED: f64 = -1e9;

pub fn init_linear<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) {
    p.push_normal(format!("{prefix}.w"), &[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng);
    p.push_full(format!("{prefix}.b"), &[fan_out], 0.0);
}

pub fn init_layer_norm<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, d: usize) {
    p.push_full(format!("{prefix}.g"), &[d], 1.0);
    p.push_full(format!("{prefix}.b"), &[d], 0.0);
}

/// `x @ w + b` over the last axis.
pub fn linear<T: Scalar>(p: &Bound<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(x.matmul(w)?.add(b)?)
}

pub fn layer_norm<T: Scalar>(p: &Bound<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let g = p.get(&format!("{prefix}.g"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(x.layer_norm(g, b, 1e-5)?)
}

/// Tanh approximation of GELU. Smooth, so curvature checks see no kinks.
pub fn gelu<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let cube = x.mul(x)?.mul(x)?;
    let inner = x.add(&cube.scale(T::of(0.044715))?)?.scale(c)?;
    let half = T::of(0.5);
    Ok(x.mul(&inner.tanh()?.add_scalar(T::one())?)?.scale(half)?)
}

#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
}

/// Pre-norm transformer block parameters under `prefix`.
pub fn init_block<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, s: BlockShape, rng: &mut impl Rng) {
    let d = s.d_model;
    let resid_gain = 1.0 / (2.0 * s.n_layers.max(1) as f64).sqrt();
    init_layer_norm(p, &format!("{prefix}.ln1"), d);
    init_linear(p, &format!("{prefix}.attn.q"), d, d, 1.0, rng);
    init_linear(p, &format!("{prefix}.attn.k"), d, d, 1.0, rng);
    init_linear(p, &format!("{prefix}.attn.v"), d, d, 1.0, rng);
    init_linear(p, &format!("{prefix}.attn.o"), d, d, resid_gain, rng);
    init_layer_norm(p, &format!("{prefix}.ln2"), d);
    init_linear(p, &format!("{prefix}.mlp.up"), d, s.d_ff, 1.0, rng);
    init_linear(p, &format!("{prefix}.mlp.down"), s.d_ff, d, resid_gain, rng);
}

/// Multi-head self-attention plus MLP, both residual. `x` is `[B, T, d]`,
/// `mask` an additive `[B, 1, T, T]` constant (or `None` for full attention).
pub fn block<T: Scalar>(p: &Bound<T>, prefix: &str, x: &Var<T>, mask: Option<&Var<T>>, n_heads: usize) -> Result<Var<T>> {
    let shape = x.shape();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / n_heads;
    let h = layer_norm(p, &format!("{prefix}.ln1"), x)?;
    let split = |v: Var<T>| v.reshape(&[b, t, n_heads, dh]);
    let q = split(linear(p, &format!("{prefix}.attn.q"), &h)?)?.permute(&[0, 2, 1, 3])?;
    let k = split(linear(p, &format!("{prefix}.attn.k"), &h)?)?.permute(&[0, 2, 3, 1])?;
    let v = split(linear(p, &format!("{prefix}.attn.v"), &h)?)?.permute(&[0, 2, 1, 3])?;
    let mut scores = q.matmul(&k)?.scale(T::one() / T::of((dh as f64).sqrt()))?;
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    let attn = scores.softmax()?.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, d])?;
    let x = x.add(&linear(p, &format!("{prefix}.attn.o"), &attn)?)?;
    let h = layer_norm(p, &format!("{prefix}.ln2"), &x)?;
    let up = gelu(&linear(p, &format!("{prefix}.mlp.up"), &h)?)?;
    Ok(x.add(&linear(p, &format!("{prefix}.mlp.down"), &up)?)?)
}

/// Additive `[B, 1, T, T]` mask: position i attends to j iff j <= i and both
/// lie in the same segment (block-diagonal causal attention for packed rows).
pub fn causal_segment_mask<T: Scalar>(batch: usize, seq: usize, segments: &[u32]) -> Tensor<T> {
    let mut data = vec![T::zero(); batch * seq * seq];
    for r in 0..batch {
        let seg = &segments[r * seq..(r + 1) * seq];
        for i in 0..seq {
            for j in 0..seq {
                if j > i || seg[j] != seg[i] {
                    data[(r * seq + i) * seq + j] = T::of(MASKED);
                }
            }
        }
    }
    Tensor::new(data, &[batch, 1, seq, seq]).expect("mask shape")
}

/// Position of each token inside its segment.
pub fn segment_positions(batch: usize, seq: usize, segments: &[u32]) -> Vec<usize> {
    let mut pos = vec![0; batch * seq];
    for r in 0..batch {
        for i in 1..seq {
            let k = r * seq + i;
            pos[k] = if segments[k] == segments[k - 1] { pos[k - 1] + 1 } else { 0 };
        }
    }
    pos
}
