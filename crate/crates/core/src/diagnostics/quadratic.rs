//! Quadratic downstream losses `½ θᵀAθ + bᵀθ` with a known smoothness
//! constant, and the one-step descent bound checked on them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vbpt_autodiff::{GradVector, Graph, Layout, Tensor};

use crate::error::{Error, Result};
use crate::trainer::ProbeRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTestbed {
    pub d: usize,
    /// Row-major `d × d`, symmetric positive semidefinite.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Largest eigenvalue of `a`, by power iteration.
    pub l: f64,
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn gaussian(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Largest eigenvalue of a symmetric PSD matrix.
pub fn power_iteration(a: &[f64], d: usize, max_iter: usize, tol: f64) -> f64 {
    let mut x = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let y = matvec(a, d, &x);
        let n = dot(&y, &y).sqrt();
        if n == 0.0 {
            return 0.0;
        }
        let next = dot(&x, &y);
        x = y.into_iter().map(|v| v / n).collect();
        if (next - lambda).abs() <= tol * next.abs().max(1e-300) {
            return next;
        }
        lambda = next;
    }
    lambda
}

fn matvec(a: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    (0..d).map(|i| dot(&a[i * d..(i + 1) * d], x)).collect()
}

impl QuadraticTestbed {
    /// Checks symmetry and computes `L`.
    pub fn new(d: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != d * d || b.len() != d || d == 0 {
            return Err(Error::Shape(format!("quadratic of dimension {d} needs {} and {d} entries", d * d)));
        }
        for i in 0..d {
            for j in 0..i {
                if (a[i * d + j] - a[j * d + i]).abs() > 1e-12 {
                    return Err(Error::Config(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        let l = power_iteration(&a, d, 100_000, 1e-15);
        Ok(QuadraticTestbed { d, a, b, l })
    }

    /// `A = L·I`, the case where the descent bound is an equality.
    pub fn scaled_identity(d: usize, l: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = l;
        }
        Self::new(d, a, gaussian(d, rng))
    }

    /// `A = Qᵀ diag(λ) Q` with a random rotation, `λ_max = l` and every other
    /// eigenvalue at most `0.9 l`.
    pub fn random(d: usize, l: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
        while q.len() < d {
            let mut v = gaussian(d, rng);
            for u in &q {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
            }
            let n = dot(&v, &v).sqrt();
            if n > 1e-8 {
                q.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let lambdas: Vec<f64> = (0..d).map(|k| if k == 0 { l } else { 0.9 * l * rng.random::<f64>() }).collect();
        let mut a = vec![0.0; d * d];
        for (u, &lam) in q.iter().zip(&lambdas) {
            for i in 0..d {
                for j in 0..d {
                    a[i * d + j] += lam * u[i] * u[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                let m = 0.5 * (a[i * d + j] + a[j * d + i]);
                a[i * d + j] = m;
                a[j * d + i] = m;
            }
        }
        Self::new(d, a, gaussian(d, rng))
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        0.5 * dot(theta, &matvec(&self.a, self.d, theta)) + dot(&self.b, theta)
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        matvec(&self.a, self.d, theta).into_iter().zip(&self.b).map(|(x, y)| x + y).collect()
    }

    /// `vᵀ A v`.
    pub fn curvature(&self, v: &[f64]) -> f64 {
        dot(v, &matvec(&self.a, self.d, v))
    }

    /// `vᵀ H v` at `theta` through the autodiff Hessian-vector product.
    pub fn curvature_hvp(&self, theta: &[f64], v: &[f64]) -> Result<f64> {
        let g = Graph::<f64>::new();
        let d = self.d;
        let x = g.param(Tensor::new(theta.to_vec(), &[d, 1])?);
        let a = g.constant(Tensor::new(self.a.clone(), &[d, d])?);
        let b = g.constant(Tensor::new(self.b.clone(), &[d, 1])?);
        let quad = x.transpose()?.matmul(&a.matmul(&x)?)?.sum()?.scale(0.5)?;
        let loss = quad.add(&b.transpose()?.matmul(&x)?.sum()?)?;
        let set = vbpt_autodiff::ParamSet::new(vec![("theta".to_string(), x)]);
        let layout = Layout::new([("theta", vec![d, 1])]);
        let hv = g.hvp(&loss, &set, &GradVector::new(layout, v.to_vec())?)?;
        Ok(dot(hv.entries(), v))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub trials: usize,
    pub violations: usize,
    /// Smallest `improvement − bound` seen.
    pub min_slack: f64,
    pub tolerance: f64,
}

impl DescentReport {
    pub fn passed(&self) -> bool {
        self.trials > 0 && self.violations == 0
    }
}

/// Samples `(θ, g_pre, η ≤ eta_max)` and checks
/// `L(θ) − L(θ − η g_pre) ≥ η·V − (L η²/2)·‖g_pre‖² − tol` with `V = ∇L(θ)ᵀ g_pre`.
pub fn check_descent_bound(tb: &QuadraticTestbed, trials: usize, eta_max: f64, tol: f64, rng: &mut impl Rng) -> DescentReport {
    let mut rep = DescentReport { trials, violations: 0, min_slack: f64::INFINITY, tolerance: tol };
    for _ in 0..trials {
        let theta = gaussian(tb.d, rng);
        let scale = 10f64.powf(rng.random_range(-2.0..1.0));
        let g_pre: Vec<f64> = gaussian(tb.d, rng).into_iter().map(|x| x * scale).collect();
        let eta = eta_max * rng.random::<f64>();
        let (slack, _) = descent_slack(tb, &theta, &g_pre, eta);
        rep.min_slack = rep.min_slack.min(slack);
        if slack < -tol {
            rep.violations += 1;
        }
    }
    rep
}

/// `(improvement − bound, bound)` for one state.
pub fn descent_slack(tb: &QuadraticTestbed, theta: &[f64], g_pre: &[f64], eta: f64) -> (f64, f64) {
    let v = dot(&tb.grad(theta), g_pre);
    let plus: Vec<f64> = theta.iter().zip(g_pre).map(|(t, g)| t - eta * g).collect();
    let improvement = tb.loss(theta) - tb.loss(&plus);
    let bound = eta * v - tb.l * eta * eta / 2.0 * dot(g_pre, g_pre);
    (improvement - bound, bound)
}

/// Largest `|improvement − bound|` over random states of an `A = L·I` testbed.
pub fn check_descent_equality(d: usize, l: f64, trials: usize, rng: &mut impl Rng) -> Result<f64> {
    let tb = QuadraticTestbed::scaled_identity(d, l, rng)?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let theta = gaussian(d, rng);
        let g_pre = gaussian(d, rng);
        let eta = rng.random::<f64>() / l;
        worst = worst.max(descent_slack(&tb, &theta, &g_pre, eta).0.abs());
    }
    Ok(worst)
}

/// Predicted versus realized improvement of plain gradient steps on `tb`.
pub fn quadratic_probes(tb: &QuadraticTestbed, n: usize, eta: f64, rng: &mut impl Rng) -> Vec<ProbeRecord> {
    (0..n as u64)
        .map(|step| {
            let theta = gaussian(tb.d, rng);
            let g_pre = gaussian(tb.d, rng);
            let predicted = eta * dot(&tb.grad(&theta), &g_pre);
            let plus: Vec<f64> = theta.iter().zip(&g_pre).map(|(t, g)| t - eta * g).collect();
            ProbeRecord { step, predicted, realized: tb.loss(&theta) - tb.loss(&plus) }
        })
        .collect()
}
