//! Adam-family optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};
use vbpt_autodiff::{GradVector, Scalar};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of total steps with linear warmup.
    pub warmup_frac: f64,
    /// Cosine decay to `min_lr_frac * lr` after warmup; constant otherwise.
    pub cosine: bool,
    pub min_lr_frac: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::learner()
    }
}

impl AdamConfig {
    pub fn learner() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_frac: 0.05,
            cosine: true,
            min_lr_frac: 0.1,
        }
    }

    /// Plain Adam at a constant rate, unclipped.
    pub fn designer() -> Self {
        AdamConfig { lr: 1e-3, weight_decay: 0.0, grad_clip: 0.0, warmup_frac: 0.0, cosine: false, ..AdamConfig::learner() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0
            && (0.0..=1.0).contains(&self.warmup_frac)
            && (0.0..=1.0).contains(&self.min_lr_frac);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate at 0-based `step` of `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let warm = (self.warmup_frac * total as f64).round() as u64;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        if !self.cosine {
            return self.lr;
        }
        let span = total.saturating_sub(warm).max(1) as f64;
        let t = ((step - warm) as f64 / span).min(1.0);
        let floor = self.min_lr_frac * self.lr;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// What one update did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    pub total_steps: u64,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, n_params: usize, total_steps: u64) -> Self {
        Adam { cfg, total_steps, step: 0, m: vec![T::zero(); n_params], v: vec![T::zero(); n_params] }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr_at(self.step, self.total_steps)
    }

    /// One descent step on `params` along `grad` (same layout).
    pub fn update(&mut self, params: &mut ParamStore<T>, grad: &GradVector<T>) -> Result<StepStats> {
        if grad.len() != self.m.len() || *grad.layout() != params.layout() {
            return Err(Error::Autodiff(vbpt_autodiff::Error::LayoutMismatch("gradient does not match parameters".into())));
        }
        if !grad.is_finite() {
            return Err(Error::Divergence { what: "gradient".into(), step: self.step });
        }
        let lr = self.lr();
        let grad_norm = grad.norm().as_f64();
        let c = self.cfg.grad_clip;
        let scale = if c > 0.0 && grad_norm > c { c / grad_norm } else { 1.0 };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay_blocks: Vec<bool> = params.tensors().iter().map(|x| x.shape().len() >= 2).collect();
        let mut flat = params.to_flat();
        let (tb1, tb2, teps, tscale) = (T::of(b1), T::of(b2), T::of(self.cfg.eps), T::of(scale));
        let (tlr, tbc1, tbc2) = (T::of(lr), T::of(bc1), T::of(bc2));
        let twd = T::of(lr * self.cfg.weight_decay);
        for (e, decay) in grad.layout().entries().iter().zip(decay_blocks) {
            for i in e.offset..e.offset + e.len {
                let g = grad.entries()[i] * tscale;
                self.m[i] = tb1 * self.m[i] + (T::one() - tb1) * g;
                self.v[i] = tb2 * self.v[i] + (T::one() - tb2) * g * g;
                let mhat = self.m[i] / tbc1;
                let vhat = self.v[i] / tbc2;
                if decay && self.cfg.weight_decay > 0.0 {
                    flat[i] = flat[i] - twd * flat[i];
                }
                flat[i] -= tlr * mhat / (vhat.sqrt() + teps);
            }
        }
        params.set_flat(&flat)?;
        self.step += 1;
        Ok(StepStats { lr, grad_norm, clipped: scale < 1.0 })
    }
}
