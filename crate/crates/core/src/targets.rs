//! Next-token targets: loss-bearing rows, top-K candidate sets, soft-target
//! mixtures and the cross-entropy pretraining loss.

use vbpt_autodiff::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::lm::TokenBatch;

/// Loss-bearing positions of a packed batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossRows {
    /// Flat index of the position whose output predicts the target.
    pub rows: Vec<usize>,
    /// Flat index of the target position.
    pub positions: Vec<usize>,
    /// Target token ids.
    pub targets: Vec<u32>,
}

impl LossRows {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Every position with `loss_mask` set that has a predecessor in its own
/// segment becomes a loss row.
pub fn loss_rows(batch: &TokenBatch, loss_mask: &[bool]) -> Result<LossRows> {
    if loss_mask.len() != batch.tokens.len() {
        return Err(Error::Shape("loss mask length differs from token count".into()));
    }
    let mut out = LossRows { rows: Vec::new(), positions: Vec::new(), targets: Vec::new() };
    for (k, &m) in loss_mask.iter().enumerate() {
        if m && k % batch.seq != 0 && batch.segments[k] == batch.segments[k - 1] {
            out.rows.push(k - 1);
            out.positions.push(k);
            out.targets.push(batch.tokens[k]);
        }
    }
    if out.is_empty() {
        return Err(Error::NoLossPositions);
    }
    Ok(out)
}

/// Top-`k` token ids of one logit row, highest first, ties to the lower id.
/// When `truth` is missing it replaces the last (lowest) candidate.
pub fn top_k_with_truth<T: Scalar>(row: &[T], k: usize, truth: u32) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..row.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        row[b as usize]
            .partial_cmp(&row[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    if !ids.contains(&truth) {
        *ids.last_mut().expect("k >= 1") = truth;
    }
    ids
}

/// Candidate sets for every loss row, flattened `[N * k]`, plus the slot of
/// the true token in each set.
pub fn candidate_sets<T: Scalar>(logits: &Tensor<T>, rows: &LossRows, k: usize) -> Result<(Vec<u32>, Vec<usize>)> {
    let v = *logits.shape().last().unwrap();
    if k == 0 || k > v {
        return Err(Error::Config(format!("top-K size {k} outside [1, {v}]")));
    }
    let mut cand = Vec::with_capacity(rows.len() * k);
    let mut slot = Vec::with_capacity(rows.len());
    for (&r, &w) in rows.rows.iter().zip(&rows.targets) {
        let ids = top_k_with_truth(&logits.data()[r * v..(r + 1) * v], k, w);
        slot.push(ids.iter().position(|&c| c == w).expect("truth included"));
        cand.extend(ids);
    }
    Ok((cand, slot))
}

pub fn one_hot<T: Scalar>(n: usize, width: usize, hot: &[usize]) -> Tensor<T> {
    let mut data = vec![T::zero(); n * width];
    for (r, &h) in hot.iter().enumerate() {
        data[r * width + h] = T::one();
    }
    Tensor::new(data, &[n, width]).expect("one-hot shape")
}

/// Soft targets over candidate sets, as plain tensors.
#[derive(Clone, Debug)]
pub struct CandidateTargets<T: Scalar> {
    /// `[N * K]` candidate ids.
    pub cand: Vec<u32>,
    pub k: usize,
    /// `[N, K]` mixture on the candidates.
    pub q: Tensor<T>,
}

impl<T: Scalar> CandidateTargets<T> {
    /// Lifts the candidate mixture to the full vocabulary, `[N, V]`.
    pub fn full(&self, vocab: usize) -> Result<Tensor<T>> {
        Ok(self.q.scatter_last(&self.cand_idx(), vocab)?)
    }

    pub fn cand_idx(&self) -> Vec<usize> {
        self.cand.iter().map(|&c| c as usize).collect()
    }
}

/// Per-position soft target in a readable form.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget<T> {
    pub position: usize,
    pub candidate_ids: Vec<u32>,
    pub p_phi: Vec<T>,
    pub alpha: T,
    pub q_phi: Vec<T>,
}

/// One-hot next-token targets over the full vocabulary.
pub fn one_hot_targets<T: Scalar>(rows: &LossRows, vocab: usize) -> Tensor<T> {
    let hot: Vec<usize> = rows.targets.iter().map(|&t| t as usize).collect();
    one_hot(rows.len(), vocab, &hot)
}

/// Fixed smoothing arms: `(1 - a) one_hot + a * r` over the top-K set, with
/// `r` uniform (`self_distill = false`) or the learner's renormalized softmax.
pub fn fixed_soft_targets<T: Scalar>(
    logits: &Tensor<T>,
    rows: &LossRows,
    k: usize,
    alpha: f64,
    self_distill: bool,
) -> Result<CandidateTargets<T>> {
    let v = *logits.shape().last().unwrap();
    let (cand, slot) = candidate_sets(logits, rows, k)?;
    let a = T::of(alpha);
    let mut q = vec![T::zero(); rows.len() * k];
    for (n, &r) in rows.rows.iter().enumerate() {
        let ids = &cand[n * k..(n + 1) * k];
        let mix: Vec<T> = if self_distill {
            let z: Vec<T> = ids.iter().map(|&c| logits.data()[r * v + c as usize]).collect();
            let m = z.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let e: Vec<T> = z.iter().map(|&x| (x - m).exp()).collect();
            let s: T = e.iter().copied().sum();
            e.into_iter().map(|x| x / s).collect()
        } else {
            vec![T::one() / T::of(k as f64); k]
        };
        for j in 0..k {
            let hot = if j == slot[n] { T::one() } else { T::zero() };
            q[n * k + j] = (T::one() - a) * hot + a * mix[j];
        }
    }
    Ok(CandidateTargets { cand, k, q: Tensor::new(q, &[rows.len(), k])? })
}

/// Mean cross-entropy of the loss rows' predicted distributions against
/// `target` (`[N, V]`).
pub fn pretrain_loss<T: Scalar>(logits: &Var<T>, rows: &LossRows, target: &Var<T>) -> Result<Var<T>> {
    if rows.is_empty() {
        return Err(Error::NoLossPositions);
    }
    Ok(logits.gather_rows(&rows.rows)?.cross_entropy(target)?)
}

/// [`pretrain_loss`] against a constant target tensor.
pub fn pretrain_loss_const<T: Scalar>(g: &Graph<T>, logits: &Var<T>, rows: &LossRows, target: Tensor<T>) -> Result<Var<T>> {
    pretrain_loss(logits, rows, &g.constant(target))
}
