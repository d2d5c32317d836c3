//! Minibatch value estimates against the full-batch value.
//!
//! With per-example gradients `a_i` (pretraining) and `b_j` (downstream), the
//! population objectives are the per-example means, so the full-batch value is
//! `mean(a)ᵀ mean(b)`. Drawing the two minibatches independently makes the
//! minibatch product unbiased for it; reusing one sample for both sides adds
//! the trace of the gradient covariance.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use vbpt_autodiff::GradVector;

use crate::data::language::{gen_language_task, LanguageTask};
use crate::designer::init_designer;
use crate::error::{Error, Result};
use crate::eval::labeled_batch;
use crate::lm::{init_lm, TokenBatch};
use crate::params::ParamStore;
use crate::presets::tiny_language_run;
use crate::rng;
use crate::targets::loss_rows;
use crate::value::{down_gradient, pre_gradient, FeedbackWeights, LanguageDownstream, LanguagePretrain, LANGUAGE_EVALUATOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub v_full: f64,
    pub mean: f64,
    /// Standard error of `mean`.
    pub se: f64,
    pub n_pairs: usize,
    pub batch_pre: usize,
    pub batch_down: usize,
}

impl UnbiasednessReport {
    pub fn passed(&self) -> bool {
        let gap = (self.mean - self.v_full).abs();
        if self.se == 0.0 {
            gap <= 1e-12 * self.v_full.abs().max(1.0)
        } else {
            gap < 3.0 * self.se
        }
    }
}

fn mean_std_err(xs: &[f64]) -> (f64, f64) {
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Mean over the chosen rows and columns of a dot-product table.
fn block_mean(table: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    let s: f64 = rows.iter().map(|&i| cols.iter().map(|&j| table[i][j]).sum::<f64>()).sum();
    s / (rows.len() * cols.len()) as f64
}

fn draw(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Samples `n_pairs` independent minibatch pairs without replacement within
/// each batch.
pub fn check_unbiasedness(
    pre: &[GradVector<f64>],
    down: &[GradVector<f64>],
    batch_pre: usize,
    batch_down: usize,
    n_pairs: usize,
    rng: &mut impl Rng,
) -> Result<UnbiasednessReport> {
    if pre.is_empty() || down.is_empty() {
        return Err(Error::Empty("per-example gradients"));
    }
    if batch_pre == 0 || batch_down == 0 || batch_pre > pre.len() || batch_down > down.len() {
        return Err(Error::Config(format!(
            "batch sizes ({batch_pre}, {batch_down}) must lie in 1..={} and 1..={}",
            pre.len(),
            down.len()
        )));
    }
    if n_pairs < 2 {
        return Err(Error::Insufficient("need at least two minibatch pairs".into()));
    }
    let table: Vec<Vec<f64>> = pre.iter().map(|a| down.iter().map(|b| a.dot(b)).collect::<std::result::Result<_, _>>()).collect::<std::result::Result<_, _>>()?;
    let all_pre: Vec<usize> = (0..pre.len()).collect();
    let all_down: Vec<usize> = (0..down.len()).collect();
    let v_full = block_mean(&table, &all_pre, &all_down);
    let estimates: Vec<f64> = (0..n_pairs)
        .map(|_| {
            let r = draw(pre.len(), batch_pre, rng);
            let c = draw(down.len(), batch_down, rng);
            block_mean(&table, &r, &c)
        })
        .collect();
    let (mean, se) = mean_std_err(&estimates);
    let full = batch_pre == pre.len() && batch_down == down.len();
    if se == 0.0 && !full {
        return Err(Error::Insufficient("minibatch values have zero variance; the per-example gradients are degenerate".into()));
    }
    Ok(UnbiasednessReport { v_full, mean, se, n_pairs, batch_pre, batch_down })
}

/// Per-example gradients of a tiny transformer with a random designer on the
/// toy arithmetic task generated from `seed`: one pretraining gradient per
/// packed corpus row and one downstream gradient per feedback example.
pub fn toy_example_gradients(seed: u64) -> Result<(Vec<GradVector<f64>>, Vec<GradVector<f64>>)> {
    let mut run = tiny_language_run();
    run.data.seed = seed;
    run.data.corpus.seed = seed;
    let task: LanguageTask = gen_language_task(&run.data)?;
    let theta: ParamStore<f64> = init_lm(&run.model, &mut rng::stream(seed, "unbiased.theta"));
    let phi: ParamStore<f64> = init_designer(&run.designer, &mut rng::stream(seed, "unbiased.phi"));
    let mut pre = Vec::with_capacity(task.rows.len());
    for row in task.rows.iter().filter(|r| r.loss_mask.iter().any(|&m| m)) {
        let batch = TokenBatch { tokens: row.tokens.clone(), segments: row.segments.clone(), batch: 1, seq: run.data.seq_len };
        let rows = loss_rows(&batch, &row.loss_mask)?;
        let obj = LanguagePretrain { lm: &run.model, designer: &run.designer, batch: &batch, rows: &rows };
        pre.push(pre_gradient(&obj, &theta, &phi)?.1);
    }
    let weights = FeedbackWeights::single(LANGUAGE_EVALUATOR);
    let mut down = Vec::with_capacity(task.feedback.examples.len());
    for ex in &task.feedback.examples {
        let (batch, rows) = labeled_batch(&[ex], run.data.seq_len)?;
        let obj = LanguageDownstream { lm: &run.model, batch: &batch, rows: &rows };
        down.push(down_gradient(&obj, &theta, &weights)?);
    }
    Ok((pre, down))
}

/// Dependent versus independent sampling on a finite set of per-example
/// gradients `x_i` shared by both losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependenceDemo {
    /// `‖mean(x)‖²`.
    pub v_full: f64,
    /// Trace of the per-example gradient covariance.
    pub trace_cov: f64,
    /// Mean and standard error of `x_iᵀ x_i`, one draw for both sides.
    pub dependent: (f64, f64),
    /// Mean and standard error of `x_iᵀ x_j` with independent draws.
    pub independent: (f64, f64),
}

impl DependenceDemo {
    /// The dependent estimator misses the full-batch value by more than
    /// three standard errors and lands on `V + trace_cov`; the independent
    /// one stays within three standard errors of `V`.
    pub fn bias_detected(&self) -> bool {
        let (dm, dse) = self.dependent;
        let (im, ise) = self.independent;
        (dm - self.v_full).abs() > 3.0 * dse
            && (dm - self.v_full - self.trace_cov).abs() < 3.0 * dse.max(1e-12)
            && (im - self.v_full).abs() < 3.0 * ise.max(1e-12)
    }
}

pub fn dependence_demo(points: &[Vec<f64>], n: usize, rng: &mut impl Rng) -> Result<DependenceDemo> {
    if points.len() < 2 || n < 2 {
        return Err(Error::Insufficient("need at least two points and two draws".into()));
    }
    let d = points[0].len();
    let k = points.len() as f64;
    let mean: Vec<f64> = (0..d).map(|c| points.iter().map(|p| p[c]).sum::<f64>() / k).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let v_full = dot(&mean, &mean);
    let trace_cov = points.iter().map(|p| p.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>()).sum::<f64>() / k;
    let mut dep = Vec::with_capacity(n);
    let mut ind = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.random_range(0..points.len());
        dep.push(dot(&points[i], &points[i]));
        let (a, b) = (rng.random_range(0..points.len()), rng.random_range(0..points.len()));
        ind.push(dot(&points[a], &points[b]));
    }
    Ok(DependenceDemo { v_full, trace_cov, dependent: mean_std_err(&dep), independent: mean_std_err(&ind) })
}

/// The two-point construction used by the verification suite.
pub fn two_point_set() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.5], vec![-1.0, 0.3]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = dependence_demo(&two_point_set(), 4000, &mut rng).unwrap();
        assert!((d.v_full - 0.16).abs() < 1e-12);
        assert!((d.trace_cov - 1.01).abs() < 1e-12);
        assert!(d.bias_detected(), "{d:?}");
    }
}
