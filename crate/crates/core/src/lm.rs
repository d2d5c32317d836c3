//! Causal character-level transformer learner.

use rand::Rng;
use serde::{Deserialize, Serialize};
use vbpt_autodiff::{Graph, Scalar, Var};

use crate::error::{Error, Result};
use crate::nn::{self, BlockShape};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { vocab: 64, d_model: 128, n_heads: 4, n_layers: 4, d_ff: 512, max_seq: 128 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return Err(Error::Config("model extents must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        Ok(())
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape { d_model: self.d_model, n_heads: self.n_heads, d_ff: self.d_ff, n_layers: self.n_layers }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab, self.d_model, self.d_ff);
        let block = 2 * 2 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        v * d + self.max_seq * d + self.n_layers * block + 2 * d + d * v + v
    }
}

/// Packed token rows. `segments` marks which example each position belongs
/// to; attention and positions never cross a segment boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub segments: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    /// One unsegmented row per sequence.
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.first().map(Vec::len).ok_or(Error::Empty("batch"))?;
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Shape("rows of unequal length".into()));
        }
        Ok(TokenBatch {
            tokens: rows.concat(),
            segments: vec![0; rows.len() * seq],
            batch: rows.len(),
            seq,
        })
    }
}

pub fn init_lm<T: Scalar>(cfg: &LmConfig, rng: &mut impl Rng) -> ParamStore<T> {
    let mut p = ParamStore::new();
    let d = cfg.d_model;
    p.push_normal("embed.tok", &[cfg.vocab, d], 0.3, rng);
    p.push_normal("embed.pos", &[cfg.max_seq, d], 0.3, rng);
    for k in 0..cfg.n_layers {
        nn::init_block(&mut p, &format!("block.{k}"), cfg.block_shape(), rng);
    }
    nn::init_layer_norm(&mut p, "head.ln", d);
    nn::init_linear(&mut p, "head.out", d, cfg.vocab, 1.0, rng);
    p
}

pub struct LmOutput<T: Scalar> {
    /// `[B*T, V]`
    pub logits: Var<T>,
    /// Final normalized hidden state, `[B*T, d]`.
    pub hidden: Var<T>,
}

pub fn check_batch(batch: &TokenBatch, vocab: usize, max_seq: usize) -> Result<()> {
    if batch.seq > max_seq {
        return Err(Error::LengthOverflow { len: batch.seq, max: max_seq });
    }
    if batch.tokens.len() != batch.batch * batch.seq || batch.segments.len() != batch.tokens.len() {
        return Err(Error::Shape("token batch extents disagree".into()));
    }
    if let Some(&id) = batch.tokens.iter().find(|&&id| id as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    Ok(())
}

/// Token + position embedding followed by `n_layers` blocks under `prefix`.
pub(crate) fn embed_and_encode<T: Scalar>(
    g: &Graph<T>,
    p: &Bound<T>,
    prefix: &str,
    n_layers: usize,
    n_heads: usize,
    batch: &TokenBatch,
) -> Result<Var<T>> {
    let ids: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
    let pos = nn::segment_positions(batch.batch, batch.seq, &batch.segments);
    let tok = p.get(&format!("{prefix}embed.tok"))?.gather_rows(&ids)?;
    let pe = p.get(&format!("{prefix}embed.pos"))?.gather_rows(&pos)?;
    let d = tok.shape()[1];
    let mut x = tok.add(&pe)?.reshape(&[batch.batch, batch.seq, d])?;
    if n_layers > 0 {
        let mask = g.constant(nn::causal_segment_mask(batch.batch, batch.seq, &batch.segments));
        for k in 0..n_layers {
            x = nn::block(p, &format!("{prefix}block.{k}"), &x, Some(&mask), n_heads)?;
        }
    }
    Ok(x.reshape(&[batch.batch * batch.seq, d])?)
}

pub fn lm_forward<T: Scalar>(cfg: &LmConfig, g: &Graph<T>, p: &Bound<T>, batch: &TokenBatch) -> Result<LmOutput<T>> {
    check_batch(batch, cfg.vocab, cfg.max_seq)?;
    let x = embed_and_encode(g, p, "", cfg.n_layers, cfg.n_heads, batch)?;
    let hidden = nn::layer_norm(p, "head.ln", &x)?;
    let logits = nn::linear(p, "head.out", &hidden)?;
    Ok(LmOutput { logits, hidden })
}

/// Names of learner block `k`'s parameters.
pub fn block_prefix(k: usize) -> String {
    format!("block.{k}.")
}
