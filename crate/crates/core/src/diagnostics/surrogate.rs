//! First-order surrogate check: the downstream loss after one pretraining
//! step, `J(η) = L_down(θ − η g_pre)`, differs from `L_down(θ) − η·V` by a
//! remainder of order η², and that remainder is the curvature term
//! `η²/2 · g_preᵀ H g_pre` up to order η³.

use serde::{Deserialize, Serialize};
use vbpt_autodiff::{GradVector, Graph};

use super::quadratic::QuadraticTestbed;
use super::Faults;
use crate::data::language::gen_language_task;
use crate::designer::init_designer;
use crate::error::{Error, Result};
use crate::eval::{labeled_batch, language_downstream_loss};
use crate::lm::{init_lm, LmConfig, TokenBatch};
use crate::params::ParamStore;
use crate::presets::tiny_language_run;
use crate::rng;
use crate::targets::{loss_rows, LossRows};
use crate::value::{down_gradient, pre_gradient, FeedbackWeights, LanguageDownstream, LanguagePretrain, LANGUAGE_EVALUATOR};

/// One `(θ, g_pre)` state with a downstream loss.
pub trait SurrogateInstance {
    /// `L_down(θ)`.
    fn base_loss(&self) -> Result<f64>;
    /// `V = ∇L_down(θ)ᵀ g_pre`.
    fn value(&self) -> Result<f64>;
    /// `L_down(θ − η g_pre)`.
    fn loss_after(&self, eta: f64) -> Result<f64>;
    /// `g_preᵀ H g_pre` through the Hessian-vector product.
    fn curvature(&self, faults: Faults) -> Result<f64>;
}

pub struct QuadraticInstance {
    pub tb: QuadraticTestbed,
    pub theta: Vec<f64>,
    pub g_pre: Vec<f64>,
}

impl SurrogateInstance for QuadraticInstance {
    fn base_loss(&self) -> Result<f64> {
        Ok(self.tb.loss(&self.theta))
    }

    fn value(&self) -> Result<f64> {
        Ok(self.tb.grad(&self.theta).iter().zip(&self.g_pre).map(|(a, b)| a * b).sum())
    }

    fn loss_after(&self, eta: f64) -> Result<f64> {
        let plus: Vec<f64> = self.theta.iter().zip(&self.g_pre).map(|(t, g)| t - eta * g).collect();
        Ok(self.tb.loss(&plus))
    }

    fn curvature(&self, faults: Faults) -> Result<f64> {
        Ok(faults.apply_hvp(self.tb.curvature_hvp(&self.theta, &self.g_pre)?))
    }
}

/// A small transformer learner with a random designer: `g_pre` is the
/// gradient of the designed-target loss, `L_down` the answer loss.
pub struct TransformerInstance {
    lm: LmConfig,
    theta: ParamStore<f64>,
    g_pre: GradVector<f64>,
    down: TokenBatch,
    down_rows: LossRows,
}

impl TransformerInstance {
    pub fn toy(seed: u64) -> Result<Self> {
        let run = tiny_language_run();
        let task = gen_language_task(&run.data)?;
        let theta: ParamStore<f64> = init_lm(&run.model, &mut rng::stream(seed, "surrogate.theta"));
        let phi: ParamStore<f64> = init_designer(&run.designer, &mut rng::stream(seed, "surrogate.phi"));
        let rows = &task.rows[..task.rows.len().min(2)];
        let batch = TokenBatch {
            tokens: rows.iter().flat_map(|r| r.tokens.iter().copied()).collect(),
            segments: rows.iter().flat_map(|r| r.segments.iter().copied()).collect(),
            batch: rows.len(),
            seq: run.data.seq_len,
        };
        let mask: Vec<bool> = rows.iter().flat_map(|r| r.loss_mask.iter().copied()).collect();
        let pre_rows = loss_rows(&batch, &mask)?;
        let pre = LanguagePretrain { lm: &run.model, designer: &run.designer, batch: &batch, rows: &pre_rows };
        let (_, g_pre) = pre_gradient(&pre, &theta, &phi)?;
        let picks: Vec<_> = task.feedback.examples.iter().take(4).collect();
        let (down, down_rows) = labeled_batch(&picks, run.data.seq_len)?;
        Ok(TransformerInstance { lm: run.model, theta, g_pre, down, down_rows })
    }

    fn loss_at(&self, theta: &ParamStore<f64>) -> Result<f64> {
        let g = Graph::new();
        let _ng = g.no_grad();
        let tb = theta.bind(&g, false);
        Ok(language_downstream_loss(&self.lm, &g, &tb, &self.down, &self.down_rows)?.item())
    }
}

impl SurrogateInstance for TransformerInstance {
    fn base_loss(&self) -> Result<f64> {
        self.loss_at(&self.theta)
    }

    fn value(&self) -> Result<f64> {
        let down = LanguageDownstream { lm: &self.lm, batch: &self.down, rows: &self.down_rows };
        let g_down = down_gradient(&down, &self.theta, &FeedbackWeights::single(LANGUAGE_EVALUATOR))?;
        Ok(g_down.dot(&self.g_pre)?)
    }

    fn loss_after(&self, eta: f64) -> Result<f64> {
        let mut plus = self.theta.clone();
        plus.axpy(-eta, &self.g_pre)?;
        self.loss_at(&plus)
    }

    fn curvature(&self, faults: Faults) -> Result<f64> {
        let g = Graph::new();
        let tb = self.theta.bind(&g, true);
        let loss = language_downstream_loss(&self.lm, &g, &tb, &self.down, &self.down_rows)?;
        let hv = g.hvp(&loss, &tb.param_set(), &self.g_pre)?;
        Ok(faults.apply_hvp(hv.dot(&self.g_pre)?))
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `n` log-spaced step sizes from `hi` down to `lo`.
pub fn eta_grid(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    let (a, b) = (hi.ln(), lo.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n.max(2) - 1) as f64).exp()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub etas: Vec<f64>,
    /// `|J − L_down + η·V|` per step size.
    pub residuals: Vec<f64>,
    /// The same with the curvature term also subtracted.
    pub corrected: Vec<f64>,
    /// Fitted on residuals above the noise floor; `None` when none are.
    pub slope: Option<f64>,
    pub corrected_slope: Option<f64>,
    pub noise_floor: f64,
    pub slope_range: (f64, f64),
    pub min_corrected_slope: f64,
    pub warnings: Vec<String>,
}

impl SurrogateReport {
    /// The first-order remainder is quadratic (or zero), and subtracting the
    /// curvature term leaves a remainder of higher order (or zero).
    pub fn passed(&self) -> bool {
        let first = match self.slope {
            Some(s) => (self.slope_range.0..=self.slope_range.1).contains(&s),
            None => self.residuals.iter().all(|&r| r <= self.noise_floor),
        };
        let second = match self.corrected_slope {
            Some(s) => s >= self.min_corrected_slope,
            None => self.corrected.iter().all(|&r| r <= self.noise_floor),
        };
        first && second
    }
}

/// Evaluates the remainders on `etas` and fits their log-log slopes.
/// Points at or below the noise floor are dropped with a warning.
pub fn check_first_order_surrogate(inst: &dyn SurrogateInstance, etas: &[f64], faults: Faults) -> Result<SurrogateReport> {
    if etas.len() < 3 {
        return Err(Error::Insufficient("surrogate check needs at least three step sizes".into()));
    }
    let l0 = inst.base_loss()?;
    let v = inst.value()?;
    let c = inst.curvature(faults)?;
    let noise_floor = 1e-12 * l0.abs().max(1.0);
    let mut residuals = Vec::with_capacity(etas.len());
    let mut corrected = Vec::with_capacity(etas.len());
    for &eta in etas {
        let j = inst.loss_after(eta)?;
        let r = j - l0 + eta * v;
        residuals.push(r.abs());
        corrected.push((r - 0.5 * eta * eta * c).abs());
    }
    let mut warnings = Vec::new();
    let fit = |rs: &[f64], what: &str, warnings: &mut Vec<String>| {
        let keep: Vec<usize> = (0..rs.len()).filter(|&k| rs[k] > noise_floor).collect();
        if keep.len() < rs.len() {
            let msg = format!("{what}: {} of {} step sizes at the noise floor were dropped", rs.len() - keep.len(), rs.len());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        if keep.len() < 3 {
            return None;
        }
        let xs: Vec<f64> = keep.iter().map(|&k| etas[k]).collect();
        let ys: Vec<f64> = keep.iter().map(|&k| rs[k]).collect();
        loglog_slope(&xs, &ys)
    };
    let slope = fit(&residuals, "first-order remainder", &mut warnings);
    let corrected_slope = fit(&corrected, "curvature-corrected remainder", &mut warnings);
    Ok(SurrogateReport {
        etas: etas.to_vec(),
        residuals,
        corrected,
        slope,
        corrected_slope,
        noise_floor,
        slope_range: (1.8, 2.2),
        min_corrected_slope: 2.5,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let xs = [1e-1, 1e-2, 1e-3];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() - 2.0).abs() < 1e-12);
        let g = eta_grid(1e-1, 1e-4, 4);
        assert!((g[0] - 1e-1).abs() < 1e-15 && (g[3] - 1e-4).abs() < 1e-18);
    }
}
