//! Downstream losses and evaluation metrics.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};
use vbpt_autodiff::{Graph, Scalar, Tensor, Var};

use crate::data::images::DenseImage;
use crate::data::text::{normalize_answer, pack, TextExample};
use crate::data::vocab::EOS;
use crate::error::{Error, Result};
use crate::lm::{lm_forward, LmConfig, TokenBatch};
use crate::params::{Bound, ParamStore};
use crate::targets::{loss_rows, one_hot_targets, pretrain_loss_const, LossRows};
use crate::vision::{self, VisionConfig};

/// Packs labeled examples into a batch; returns it with its answer-span rows.
pub fn labeled_batch(examples: &[&TextExample], seq_len: usize) -> Result<(TokenBatch, LossRows)> {
    if examples.is_empty() {
        return Err(Error::Empty("labeled batch"));
    }
    let owned: Vec<TextExample> = examples.iter().map(|e| (*e).clone()).collect();
    let rows = pack(&owned, seq_len)?;
    let batch = TokenBatch {
        tokens: rows.iter().flat_map(|r| r.tokens.iter().copied()).collect(),
        segments: rows.iter().flat_map(|r| r.segments.iter().copied()).collect(),
        batch: rows.len(),
        seq: seq_len,
    };
    let mask: Vec<bool> = rows.iter().flat_map(|r| r.loss_mask.iter().copied()).collect();
    let lr = loss_rows(&batch, &mask)?;
    Ok((batch, lr))
}

/// Answer-span cross-entropy of the learner on verified labeled examples.
pub fn language_downstream_loss<T: Scalar>(cfg: &LmConfig, g: &Graph<T>, theta: &Bound<T>, batch: &TokenBatch, rows: &LossRows) -> Result<Var<T>> {
    let out = lm_forward(cfg, g, theta, batch)?;
    pretrain_loss_const(g, &out.logits, rows, one_hot_targets(rows, cfg.vocab))
}

/// Last-position logits for same-length prompts, `[B, V]`.
fn next_logits<T: Scalar>(cfg: &LmConfig, params: &ParamStore<T>, rows: &[Vec<u32>]) -> Result<Tensor<T>> {
    let g = Graph::new();
    let _ng = g.no_grad();
    let p = params.bind(&g, false);
    let batch = TokenBatch::from_rows(rows)?;
    let logits = lm_forward(cfg, &g, &p, &batch)?.logits.value();
    let (t, v) = (batch.seq, cfg.vocab);
    let last: Vec<usize> = (0..rows.len()).map(|b| b * t + t - 1).collect();
    Ok(logits.reshape(&[rows.len() * t, v])?.gather_rows(&last)?)
}

/// How the next token is picked during decoding.
#[derive(Clone, Copy, Debug)]
pub enum Decode {
    Greedy,
    Sample { temperature: f64 },
}

/// Continues each prompt (all of one length) until EOS, `max_new` tokens or
/// the context limit. Returns the generated tokens without EOS.
pub fn decode_batch<T: Scalar>(cfg: &LmConfig, params: &ParamStore<T>, prompts: &[Vec<u32>], max_new: usize, mode: Decode, rng: &mut impl Rng) -> Result<Vec<Vec<u32>>> {
    let mut seqs: Vec<Vec<u32>> = prompts.to_vec();
    let mut done = vec![false; prompts.len()];
    let mut out = vec![Vec::new(); prompts.len()];
    for _ in 0..max_new {
        if done.iter().all(|&d| d) || seqs[0].len() >= cfg.max_seq {
            break;
        }
        let logits = next_logits(cfg, params, &seqs)?;
        let v = cfg.vocab;
        for (b, seq) in seqs.iter_mut().enumerate() {
            let row = &logits.data()[b * v..(b + 1) * v];
            let tok = match mode {
                Decode::Greedy => argmax(row),
                Decode::Sample { temperature } => {
                    let m = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
                    let w: Vec<f64> = row.iter().map(|x| ((x.as_f64() - m) / temperature).exp()).collect();
                    WeightedIndex::new(&w).map_err(|e| Error::Config(e.to_string()))?.sample(rng) as u32
                }
            };
            seq.push(tok);
            if !done[b] {
                if tok == EOS {
                    done[b] = true;
                } else {
                    out[b].push(tok);
                }
            }
        }
    }
    Ok(out)
}

/// Lowest index among maximal entries.
pub fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

fn answer_correct(ex: &TextExample, generated: &[u32]) -> bool {
    let text = crate::data::vocab::decode(generated);
    matches!((normalize_answer(&text), normalize_answer(&ex.answer)), (Some(a), Some(b)) if a == b)
}

fn max_answer_tokens(examples: &[TextExample]) -> usize {
    examples.iter().map(|e| e.answer.len() + 2).max().unwrap_or(4) + 2
}

/// Groups example indices by prompt length so each group decodes as a batch.
fn by_prompt_len(examples: &[TextExample]) -> Result<BTreeMap<usize, Vec<(usize, Vec<u32>)>>> {
    let mut groups: BTreeMap<usize, Vec<(usize, Vec<u32>)>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        let p = e.prompt_tokens()?;
        groups.entry(p.len()).or_default().push((i, p));
    }
    Ok(groups)
}

/// Exact-match accuracy of greedy continuations of the zero-shot prompt.
pub fn pass_at_1<T: Scalar>(cfg: &LmConfig, params: &ParamStore<T>, examples: &[TextExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let max_new = max_answer_tokens(examples);
    let mut correct = 0usize;
    let mut rng = crate::rng::stream(0, "greedy");
    for (_, group) in by_prompt_len(examples)? {
        for chunk in group.chunks(64) {
            let prompts: Vec<Vec<u32>> = chunk.iter().map(|(_, p)| p.clone()).collect();
            let gens = decode_batch(cfg, params, &prompts, max_new, Decode::Greedy, &mut rng)?;
            correct += chunk.iter().zip(&gens).filter(|((i, _), g)| answer_correct(&examples[*i], g)).count();
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Pass@k for each `k` in `ks`, from one fixed pool of `pool` sampled
/// completions per problem: a problem counts when any of its first `k`
/// samples is correct, so the estimate never decreases in `k`.
pub fn pass_at_k<T: Scalar>(
    cfg: &LmConfig,
    params: &ParamStore<T>,
    examples: &[TextExample],
    ks: &[usize],
    pool: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if ks.iter().any(|&k| k == 0 || k > pool) {
        return Err(Error::Config(format!("every k must lie in [1, {pool}]")));
    }
    if examples.is_empty() {
        return Ok(ks.iter().map(|&k| (k, 0.0)).collect());
    }
    let max_new = max_answer_tokens(examples);
    let mut rng = crate::rng::stream(seed, "pass-at-k");
    let mut first_hit = vec![usize::MAX; examples.len()];
    for (_, group) in by_prompt_len(examples)? {
        for chunk in group.chunks(16) {
            for s in 0..pool {
                let prompts: Vec<Vec<u32>> = chunk.iter().map(|(_, p)| p.clone()).collect();
                let gens = decode_batch(cfg, params, &prompts, max_new, Decode::Sample { temperature }, &mut rng)?;
                for ((i, _), g) in chunk.iter().zip(&gens) {
                    if first_hit[*i] == usize::MAX && answer_correct(&examples[*i], g) {
                        first_hit[*i] = s;
                    }
                }
            }
        }
    }
    Ok(ks
        .iter()
        .map(|&k| (k, first_hit.iter().filter(|&&h| h < k).count() as f64 / examples.len() as f64))
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenseMetrics {
    pub miou: f64,
    pub rmse: f64,
}

/// Mean IoU over classes present in the prediction or the label; `None`
/// when no class is present at all.
pub fn mean_iou(pred: &[u8], label: &[u8], n_classes: usize) -> Option<f64> {
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    for (&p, &l) in pred.iter().zip(label) {
        if p == l {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[l as usize] += 1;
        }
    }
    let ious: Vec<f64> = (0..n_classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn rmse(pred: &[f64], label: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    (pred.iter().zip(label).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt()
}

/// Frozen-backbone features for a set of images, `[N * n_patches, d]`.
pub fn frozen_features<T: Scalar>(cfg: &VisionConfig, theta: &ParamStore<T>, images: &[&DenseImage]) -> Result<Tensor<T>> {
    let x = crate::data::images::image_tensor(images, cfg.height, cfg.width);
    vision::target_features(cfg, theta, &x)
}

/// Per-pixel labels in patch order: classes and depth.
pub fn patch_labels(cfg: &VisionConfig, images: &[&DenseImage]) -> (Vec<u8>, Vec<f64>) {
    let (h, w, p) = (cfg.height, cfg.width, cfg.patch);
    let classes: Vec<u8> = images.iter().flat_map(|im| im.classes.iter().copied()).collect();
    let depth: Vec<f64> = images.iter().flat_map(|im| im.depth.iter().copied()).collect();
    let b = images.len();
    (vision::to_patch_order(&classes, b, h, w, p), vision::to_patch_order(&depth, b, h, w, p))
}

/// Segmentation cross-entropy and depth MSE of the heads on given features.
pub struct DenseLosses<T: Scalar> {
    pub seg: Var<T>,
    pub depth: Var<T>,
}

pub fn dense_losses<T: Scalar>(cfg: &VisionConfig, g: &Graph<T>, heads: &Bound<T>, features: &Var<T>, classes: &[u8], depth: &[f64]) -> Result<DenseLosses<T>> {
    let logits = vision::seg_logits(cfg, heads, features)?;
    let hot: Vec<usize> = classes.iter().map(|&c| c as usize).collect();
    let target = g.constant(crate::targets::one_hot(hot.len(), cfg.n_classes, &hot));
    let seg = logits.cross_entropy(&target)?;
    let pred = vision::depth_pred(heads, features)?;
    let dt = Tensor::new(depth.iter().map(|&d| T::of(d)).collect(), &pred.shape())?;
    let depth = pred.mse(&g.constant(dt))?;
    Ok(DenseLosses { seg, depth })
}

/// mIoU and RMSE of the heads on frozen features of `images`.
pub fn evaluate_dense<T: Scalar>(cfg: &VisionConfig, theta: &ParamStore<T>, heads: &ParamStore<T>, images: &[&DenseImage]) -> Result<DenseMetrics> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation images"));
    }
    let feats = frozen_features(cfg, theta, images)?;
    let g = Graph::new();
    let _ng = g.no_grad();
    let hb = heads.bind(&g, false);
    let f = g.constant(feats);
    let logits = vision::seg_logits(cfg, &hb, &f)?.value();
    let pred_cls: Vec<u8> = logits.data().chunks(cfg.n_classes).map(|r| argmax(r) as u8).collect();
    let depth = vision::depth_pred(&hb, &f)?.value();
    let (cls, dep) = patch_labels(cfg, images);
    let pred_depth: Vec<f64> = depth.data().iter().map(|x| x.as_f64()).collect();
    Ok(DenseMetrics {
        miou: mean_iou(&pred_cls, &cls, cfg.n_classes).unwrap_or(0.0),
        rmse: rmse(&pred_depth, &dep),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_ignores_absent_classes() {
        let bg = vec![0u8; 10];
        assert_eq!(mean_iou(&bg, &bg, 4), Some(1.0));
        let pred = [0, 0, 1, 1];
        let label = [0, 1, 1, 1];
        // class 0: inter 1, union 2; class 1: inter 2, union 3
        assert!((mean_iou(&pred, &label, 3).unwrap() - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
