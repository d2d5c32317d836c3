//! Feedback-weight sweeps over the dense-image evaluators.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, TaskData, TrainOptions};
use crate::config::{RunConfig, TaskConfig};
use crate::error::{Error, Result};
use crate::value::{FeedbackWeights, DEPTH_EVALUATOR, SEG_EVALUATOR};

/// Final metrics of one swept run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub seg_weight: f64,
    pub depth_weight: f64,
    pub seed: u64,
    pub miou: f64,
    pub rmse: f64,
    pub dominated: bool,
}

/// Marks points `(higher-is-better, lower-is-better)` that another point
/// beats on one axis without losing on the other. Differences within `tol`
/// count as ties.
pub fn flag_dominated(points: &[(f64, f64)], tol: f64) -> Vec<bool> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            points.iter().enumerate().any(|(j, &(c, d))| {
                j != i && c >= a - tol && d <= b + tol && (c > a + tol || d < b - tol)
            })
        })
        .collect()
}

/// `(seg, depth)` weight pairs from `(1, 0)` to `(0, 1)` in `n` even steps.
pub fn weight_grid(n: usize) -> Vec<FeedbackWeights> {
    let n = n.max(2);
    (0..n)
        .map(|k| {
            let w = k as f64 / (n - 1) as f64;
            FeedbackWeights([(SEG_EVALUATOR.to_string(), 1.0 - w), (DEPTH_EVALUATOR.to_string(), w)].into())
        })
        .collect()
}

/// One run per weight setting; each run's directory is `root/sweep-<k>` when
/// `root` is given.
pub fn pareto_sweep(base: &RunConfig, data: &TaskData, grid: &[FeedbackWeights], root: Option<&Path>) -> Result<Vec<ParetoRow>> {
    if !matches!(base.task, TaskConfig::Vision(_)) {
        return Err(Error::Config("a weight sweep needs the two dense-image evaluators".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (k, w) in grid.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.feedback_weights = Some(w.clone());
        cfg.validate()?;
        let dir = root.map(|r| r.join(format!("sweep-{k}")));
        let out = train(&cfg, data, dir.as_deref(), &TrainOptions::default())?;
        let e = out.final_eval.ok_or_else(|| Error::Insufficient("run ended without a final evaluation".into()))?;
        rows.push(ParetoRow {
            seg_weight: w.get(SEG_EVALUATOR),
            depth_weight: w.get(DEPTH_EVALUATOR),
            seed: cfg.seed,
            miou: e.primary,
            rmse: e.secondary.unwrap_or(f64::NAN),
            dominated: false,
        });
    }
    let flags = flag_dominated(&rows.iter().map(|r| (r.miou, r.rmse)).collect::<Vec<_>>(), 0.0);
    for (r, f) in rows.iter_mut().zip(flags) {
        r.dominated = f;
    }
    Ok(rows)
}
