//! Language task designer: scores the learner's top-K candidates and gates
//! the mixture with the one-hot label.

use rand::Rng;
use serde::{Deserialize, Serialize};
use vbpt_autodiff::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::lm::{check_batch, embed_and_encode, TokenBatch};
use crate::nn::{self, BlockShape};
use crate::params::{Bound, ParamStore};
use crate::targets::{candidate_sets, one_hot, CandidateTargets, LossRows, SoftTarget};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub top_k: usize,
    pub alpha_max: f64,
}

impl Default for DesignerConfig {
    fn default() -> Self {
        DesignerConfig { vocab: 64, d_model: 64, n_heads: 4, n_layers: 2, d_ff: 128, max_seq: 128, top_k: 8, alpha_max: 0.5 }
    }
}

impl DesignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config("designer d_model must be a positive multiple of n_heads".into()));
        }
        if self.top_k == 0 || self.top_k > self.vocab {
            return Err(Error::Config(format!("top_k {} outside [1, {}]", self.top_k, self.vocab)));
        }
        if !(0.0..=1.0).contains(&self.alpha_max) {
            return Err(Error::Config(format!("alpha_max {} outside [0, 1]", self.alpha_max)));
        }
        Ok(())
    }
}

pub fn init_designer<T: Scalar>(cfg: &DesignerConfig, rng: &mut impl Rng) -> ParamStore<T> {
    let mut p = ParamStore::new();
    let d = cfg.d_model;
    p.push_normal("designer.embed.tok", &[cfg.vocab, d], 0.3, rng);
    p.push_normal("designer.embed.pos", &[cfg.max_seq, d], 0.3, rng);
    let shape = BlockShape { d_model: d, n_heads: cfg.n_heads, d_ff: cfg.d_ff, n_layers: cfg.n_layers };
    for k in 0..cfg.n_layers {
        nn::init_block(&mut p, &format!("designer.block.{k}"), shape, rng);
    }
    nn::init_layer_norm(&mut p, "designer.ln", d);
    // Weight on the learner's own logit; 1 starts p_phi near the learner's
    // restricted softmax.
    p.push_full("designer.score.learner_logit", &[1], 1.0);
    p.push_normal("designer.gate.w", &[d, 1], 0.1 / (d as f64).sqrt(), rng);
    p.push_full("designer.gate.b", &[1], 0.0);
    p
}

/// Designer outputs for one batch, as graph nodes (differentiable in phi
/// when phi is bound trainable).
pub struct DesignerOutput<T: Scalar> {
    pub cand: Vec<u32>,
    pub slot: Vec<usize>,
    pub k: usize,
    /// `[N, K]`
    pub p: Var<T>,
    /// `[N, 1]`, in `[0, alpha_max]`.
    pub alpha: Var<T>,
    /// `[N, K]`
    pub q: Var<T>,
}

impl<T: Scalar> DesignerOutput<T> {
    /// Mixture lifted to the full vocabulary, `[N, V]`.
    pub fn q_full(&self, vocab: usize) -> Result<Var<T>> {
        let idx: Vec<usize> = self.cand.iter().map(|&c| c as usize).collect();
        Ok(self.q.scatter_last(&idx, vocab)?)
    }

    /// Value snapshot, cut from the graph.
    pub fn detached(&self) -> CandidateTargets<T> {
        CandidateTargets { cand: self.cand.clone(), k: self.k, q: (*self.q.value()).clone() }
    }

    pub fn soft_targets(&self, rows: &LossRows) -> Vec<SoftTarget<T>> {
        let (p, a, q) = (self.p.value(), self.alpha.value(), self.q.value());
        let k = self.k;
        (0..rows.len())
            .map(|n| SoftTarget {
                position: rows.positions[n],
                candidate_ids: self.cand[n * k..(n + 1) * k].to_vec(),
                p_phi: p.data()[n * k..(n + 1) * k].to_vec(),
                alpha: a.data()[n],
                q_phi: q.data()[n * k..(n + 1) * k].to_vec(),
            })
            .collect()
    }
}

/// Builds soft targets for every loss row.
///
/// `learner_logits` are plain values (`[B*T, V]`): candidates come from them
/// and they feed the score as a constant, so no gradient reaches the learner.
pub fn designer_targets<T: Scalar>(
    cfg: &DesignerConfig,
    g: &Graph<T>,
    phi: &Bound<T>,
    batch: &TokenBatch,
    rows: &LossRows,
    learner_logits: &Tensor<T>,
) -> Result<DesignerOutput<T>> {
    check_batch(batch, cfg.vocab, cfg.max_seq)?;
    let k = cfg.top_k;
    let (cand, slot) = candidate_sets(learner_logits, rows, k)?;
    let n = rows.len();
    let d = cfg.d_model;

    let x = embed_and_encode(g, phi, "designer.", cfg.n_layers, cfg.n_heads, batch)?;
    let h = nn::layer_norm(phi, "designer.ln", &x)?.gather_rows(&rows.rows)?;
    let table = phi.get("designer.embed.tok")?;
    let truth: Vec<usize> = rows.targets.iter().map(|&t| t as usize).collect();
    let u = h.add(&table.gather_rows(&truth)?)?;

    let cand_idx: Vec<usize> = cand.iter().map(|&c| c as usize).collect();
    let e_cand = table.gather_rows(&cand_idx)?.reshape(&[n, k, d])?;
    let affinity = e_cand.matmul(&u.reshape(&[n, d, 1])?)?.reshape(&[n, k])?.scale(T::one() / T::of((d as f64).sqrt()))?;
    let z = g.constant(learner_logits.gather_rows(&rows.rows)?.gather_last(&cand_idx, k)?);
    let beta = phi.get("designer.score.learner_logit")?;
    let p = affinity.add(&z.mul(beta)?)?.softmax()?;

    let gate = u.matmul(phi.get("designer.gate.w")?)?.add(phi.get("designer.gate.b")?)?;
    let alpha = gate.sigmoid()?.scale(T::of(cfg.alpha_max))?;
    let hot = g.constant(one_hot(n, k, &slot));
    let q = hot.add(&p.sub(&hot)?.mul(&alpha)?)?;
    Ok(DesignerOutput { cand, slot, k, p, alpha, q })
}

/// Designer targets computed in a separate gradient-free graph, for learner
/// steps: the learner's loss graph never sees φ.
pub fn detached_targets<T: Scalar>(
    cfg: &DesignerConfig,
    phi: &ParamStore<T>,
    batch: &TokenBatch,
    rows: &LossRows,
    learner_logits: &Tensor<T>,
) -> Result<CandidateTargets<T>> {
    let g = Graph::new();
    let _ng = g.no_grad();
    let pb = phi.bind(&g, false);
    Ok(designer_targets(cfg, &g, &pb, batch, rows, learner_logits)?.detached())
}
