//! Alignment value, its meta-gradient and the report invariants.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbpt_autodiff::{GradVector, Graph, Layout, Tensor, Var};
use vbpt_core::data::images::{gen_dense_images, image_tensor, DenseImageSpec};
use vbpt_core::designer::{init_designer, DesignerConfig};
use vbpt_core::lm::{init_lm, LmConfig, TokenBatch};
use vbpt_core::targets::{loss_rows, LossRows};
use vbpt_core::value::*;
use vbpt_core::vision::{self, init_heads, init_vision, VisionConfig};
use vbpt_core::{Bound, Error, ParamStore, Result};

fn lm() -> LmConfig {
    LmConfig { vocab: 16, d_model: 8, n_heads: 2, n_layers: 3, d_ff: 16, max_seq: 12 }
}

/// Under 200 parameters: embeddings, final norm, score and gate only.
fn small_designer() -> DesignerConfig {
    DesignerConfig { vocab: 16, d_model: 4, n_heads: 1, n_layers: 0, d_ff: 4, max_seq: 12, top_k: 4, alpha_max: 0.5 }
}

fn batch(rng: &mut ChaCha8Rng, b: usize, t: usize) -> (TokenBatch, LossRows) {
    let rows: Vec<Vec<u32>> = (0..b).map(|_| (0..t).map(|_| rng.random_range(2..16)).collect()).collect();
    let tb = TokenBatch::from_rows(&rows).unwrap();
    let mask: Vec<bool> = (0..b * t).map(|i| i % t >= t / 2).collect();
    let lr = loss_rows(&tb, &mask).unwrap();
    (tb, lr)
}

struct Setup {
    theta: ParamStore<f64>,
    phi: ParamStore<f64>,
    pre: (TokenBatch, LossRows),
    down: (TokenBatch, LossRows),
}

fn setup(seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Setup {
        theta: init_lm(&lm(), &mut rng),
        phi: init_designer(&small_designer(), &mut rng),
        pre: batch(&mut rng, 2, 10),
        down: batch(&mut rng, 2, 10),
    }
}

fn subset_layout(theta: &ParamStore<f64>, s: &ParamSubset) -> Arc<Layout> {
    s.split(&theta.layout()).unwrap().0
}

/// Downstream loss equal to the pretraining loss with φ frozen.
struct SameAsPre<'a> {
    pre: LanguagePretrain<'a>,
    phi: &'a ParamStore<f64>,
}

impl Downstream<f64> for SameAsPre<'_> {
    fn names(&self) -> Vec<String> {
        vec!["same".into()]
    }

    fn losses(&self, g: &Graph<f64>, theta: &Bound<f64>) -> Result<Vec<Var<f64>>> {
        let pb = self.phi.bind(g, false);
        Ok(vec![self.pre.loss(g, theta, &pb)?.loss])
    }
}

#[test]
fn self_alignment_is_squared_norm() {
    let s = setup(0);
    let (l, d) = (lm(), small_designer());
    let pre = LanguagePretrain { lm: &l, designer: &d, batch: &s.pre.0, rows: &s.pre.1 };
    let down = SameAsPre { pre: LanguagePretrain { lm: &l, designer: &d, batch: &s.pre.0, rows: &s.pre.1 }, phi: &s.phi };
    let subset = ParamSubset::lm_default(&l);
    let r = compute_value(&s.theta, &s.phi, &pre, &down, &subset, &FeedbackWeights::single("same"), 0.1, (vec![1], vec![1])).unwrap();
    assert!(r.v >= 0.0);
    assert!((r.v - r.g_pre_norm_s * r.g_pre_norm_s).abs() <= 1e-12 * r.v.max(1.0));
    assert!(!r.unbiased);
    assert!((r.predicted_improvement - 0.1 * r.v).abs() < 1e-15);
}

#[test]
fn orthogonalized_feedback_gives_zero_value() {
    let s = setup(1);
    let (l, d) = (lm(), small_designer());
    let pre = LanguagePretrain { lm: &l, designer: &d, batch: &s.pre.0, rows: &s.pre.1 };
    let down = LanguageDownstream { lm: &l, batch: &s.down.0, rows: &s.down.1 };
    let subset = ParamSubset::lm_default(&l);
    let (_, g_pre) = pre_gradient(&pre, &s.theta, &s.phi).unwrap();
    let g_down = down_gradient(&down, &s.theta, &FeedbackWeights::single(LANGUAGE_EVALUATOR)).unwrap();
    let sl = subset_layout(&s.theta, &subset);
    let (p, q) = (g_pre.restrict(&sl).unwrap(), g_down.restrict(&sl).unwrap());
    let ortho = q.axpy(-q.dot(&p).unwrap() / p.dot(&p).unwrap(), &p).unwrap();
    let r = value_report(&p, &ortho, &ParamSubset::all(), 1.0, vec![], vec![], true).unwrap();
    assert!(r.v.abs() < 1e-10);
}

fn vision_fixture(seed: u64) -> (VisionConfig, ParamStore<f64>, ParamStore<f64>, vbpt_core::data::images::DenseImageTask) {
    let cfg = VisionConfig { height: 8, width: 8, patch: 4, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, ..Default::default() };
    let spec = DenseImageSpec { seed, height: 8, width: 8, n_unlabeled: 4, n_train_head: 0, n_meta: 4, n_eval: 0, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = init_vision(&cfg, &mut rng);
    let heads = init_heads(&cfg, &mut rng);
    (cfg, theta, heads, gen_dense_images(&spec).unwrap())
}

#[test]
fn value_is_linear_in_feedback_weights() {
    let (cfg, theta, heads, task) = vision_fixture(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let phi = vbpt_core::mask_designer::init_mask_designer(&Default::default(), &cfg, &mut rng);
    let imgs: Vec<_> = task.unlabeled.iter().collect();
    let x = image_tensor::<f64>(&imgs, 8, 8);
    let target = vision::target_features(&cfg, &theta, &x).unwrap();
    let pre = VisionPretrain { cfg: &cfg, images: &x, target: &target, lambda_spars: 1.0, lambda_tv: 0.1, keep_ratio: 0.5 };
    let meta: Vec<_> = task.meta.iter().collect();
    let down = VisionDownstream { cfg: &cfg, heads: &heads, images: &meta };
    let subset = ParamSubset::vision_default(&cfg);
    let w = |a: f64, b: f64| FeedbackWeights([(SEG_EVALUATOR.to_string(), a), (DEPTH_EVALUATOR.to_string(), b)].into());
    let v = |a, b| compute_value(&theta, &phi, &pre, &down, &subset, &w(a, b), 1.0, (vec![0], vec![1])).unwrap().v;
    let (seg, depth, both) = (v(1.0, 0.0), v(0.0, 1.0), v(1.0, 1.0));
    assert!((seg + depth - both).abs() <= 1e-12 * both.abs().max(1.0));
    assert!((v(2.0, 0.0) - 2.0 * seg).abs() <= 1e-12 * seg.abs().max(1.0));
}

#[test]
fn value_is_bilinear_under_random_scaling() {
    let s = setup(3);
    let (l, d) = (lm(), small_designer());
    let pre = LanguagePretrain { lm: &l, designer: &d, batch: &s.pre.0, rows: &s.pre.1 };
    let down = LanguageDownstream { lm: &l, batch: &s.down.0, rows: &s.down.1 };
    let subset = ParamSubset::lm_default(&l);
    let (_, g_pre) = pre_gradient(&pre, &s.theta, &s.phi).unwrap();
    let g_down = down_gradient(&down, &s.theta, &FeedbackWeights::single(LANGUAGE_EVALUATOR)).unwrap();
    let base = value_report(&g_pre, &g_down, &subset, 1.0, vec![], vec![], true).unwrap().v;
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..20 {
        let (a, b) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let va = value_report(&g_pre.scale(a), &g_down, &subset, 1.0, vec![], vec![], true).unwrap().v;
        let vb = value_report(&g_pre, &g_down.scale(b), &subset, 1.0, vec![], vec![], true).unwrap().v;
        assert!((va - a * base).abs() <= 1e-12 * (a * base).abs().max(1e-300));
        assert!((vb - b * base).abs() <= 1e-12 * (b * base).abs().max(1e-300));
    }
}

#[test]
fn omitted_term_bound_holds_on_random_draws() {
    let (l, d) = (lm(), small_designer());
    let subset = ParamSubset::lm_default(&l);
    for seed in 0..100 {
        let s = setup(1000 + seed);
        let pre = LanguagePretrain { lm: &l, designer: &d, batch: &s.pre.0, rows: &s.pre.1 };
        let down = LanguageDownstream { lm: &l, batch: &s.down.0, rows: &s.down.1 };
        let r = compute_value(&s.theta, &s.phi, &pre, &down, &subset, &FeedbackWeights::single(LANGUAGE_EVALUATOR), 0.1, (vec![0], vec![1])).unwrap();
        assert!(r.unbiased);
        let full = r.v_full.unwrap();
        assert!((full - r.v).abs() <= r.omitted_bound + 1e-12, "seed {seed}: {} > {}", (full - r.v).abs(), r.omitted_bound);
        assert!(r.bound_holds());
    }
}

/// `L_pre = φ θ` with scalar parameters.
struct Product;

impl Pretrain<f64> for Product {
    fn loss(&self, _g: &Graph<f64>, theta: &Bound<f64>, phi: &Bound<f64>) -> Result<PretrainLoss<f64>> {
        let l = theta.get("theta")?.mul(phi.get("phi")?)?.sum()?;
        Ok(PretrainLoss { loss: l, regularizer: None })
    }
}

/// A loss that ignores φ.
struct NoDesigner;

impl Pretrain<f64> for NoDesigner {
    fn loss(&self, _g: &Graph<f64>, theta: &Bound<f64>, _phi: &Bound<f64>) -> Result<PretrainLoss<f64>> {
        Ok(PretrainLoss { loss: theta.get("theta")?.square()?.sum()?, regularizer: None })
    }
}

fn scalar_store(name: &str, v: f64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.push(name, Tensor::from_f64(&[v], &[1]).unwrap());
    p
}

#[test]
fn one_parameter_closed_form() {
    let theta = scalar_store("theta", 0.7);
    for phi_v in [-2.0, 0.0, 3.5] {
        let phi = scalar_store("phi", phi_v);
        // L_down = θ, so g_down = 1
        let g_down = GradVector::new(theta.layout(), vec![1.0]).unwrap();
        let mg = meta_gradient(&Product, &theta, &phi, &ParamSubset::all(), &g_down).unwrap();
        assert_eq!(mg.v, phi_v);
        assert_eq!(mg.grad.entries(), &[-1.0]);
        assert!(!mg.phi_absent);
    }
}

#[test]
fn designer_free_loss_gives_flagged_zero_gradient() {
    let theta = scalar_store("theta", 0.7);
    let phi = scalar_store("phi", 1.0);
    let g_down = GradVector::new(theta.layout(), vec![1.0]).unwrap();
    let mg = meta_gradient(&NoDesigner, &theta, &phi, &ParamSubset::all(), &g_down).unwrap();
    assert!(mg.phi_absent);
    assert_eq!(mg.grad.entries(), &[0.0]);
}

#[test]
fn empty_subset_and_bad_weights_are_rejected() {
    let theta = scalar_store("theta", 0.7);
    let phi = scalar_store("phi", 1.0);
    let none = ParamSubset::from_prefixes(["nothing."]);
    let g_down = GradVector::new(theta.layout(), vec![1.0]).unwrap();
    assert!(matches!(meta_gradient(&Product, &theta, &phi, &none, &g_down), Err(Error::Empty(_))));
    assert!(FeedbackWeights([("a".to_string(), 0.0)].into()).validate().is_err());
    assert!(FeedbackWeights([("a".to_string(), f64::NAN)].into()).validate().is_err());
    assert!(FeedbackWeights([("a".to_string(), -1.0)].into()).validate().is_err());
}

/// `-V(φ)` with plain first-order gradients, for finite differences.
fn neg_value(l: &LmConfig, d: &DesignerConfig, s: &Setup, phi: &ParamStore<f64>, _subset: &ParamSubset, g_down: &GradVector<f64>) -> f64 {
    let pre = LanguagePretrain { lm: l, designer: d, batch: &s.pre.0, rows: &s.pre.1 };
    let (_, g_pre) = pre_gradient(&pre, &s.theta, phi).unwrap();
    -g_pre.restrict(g_down.layout()).unwrap().dot(g_down).unwrap()
}

#[test]
fn meta_gradient_matches_finite_differences() {
    let (l, d) = (lm(), small_designer());
    for seed in 0..2 {
        let s = setup(50 + seed);
        assert!(s.phi.numel() <= 200, "designer has {} parameters", s.phi.numel());
        let subset = ParamSubset::lm_default(&l);
        let down = LanguageDownstream { lm: &l, batch: &s.down.0, rows: &s.down.1 };
        let g_down = down_gradient(&down, &s.theta, &FeedbackWeights::single(LANGUAGE_EVALUATOR)).unwrap();
        let g_down = g_down.restrict(&subset_layout(&s.theta, &subset)).unwrap();
        let pre = LanguagePretrain { lm: &l, designer: &d, batch: &s.pre.0, rows: &s.pre.1 };
        let mg = meta_gradient(&pre, &s.theta, &s.phi, &subset, &g_down).unwrap();
        let eps = 1e-4;
        let base = s.phi.to_flat();
        let mut fd = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut phi = s.phi.clone();
            let mut f = base.clone();
            f[i] = base[i] + eps;
            phi.set_flat(&f).unwrap();
            let plus = neg_value(&l, &d, &s, &phi, &subset, &g_down);
            f[i] = base[i] - eps;
            phi.set_flat(&f).unwrap();
            let minus = neg_value(&l, &d, &s, &phi, &subset, &g_down);
            fd[i] = (plus - minus) / (2.0 * eps);
        }
        let diff: f64 = mg.grad.entries().iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0);
        assert!(diff / norm < 1e-3, "seed {seed}: relative error {:e}", diff / norm);
    }
}

#[test]
fn meta_gradient_ignores_evaluator_heads_given_feedback_vector() {
    let (cfg, theta, heads, task) = vision_fixture(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let phi = vbpt_core::mask_designer::init_mask_designer(&Default::default(), &cfg, &mut rng);
    let imgs: Vec<_> = task.unlabeled.iter().collect();
    let x = image_tensor::<f64>(&imgs, 8, 8);
    let target = vision::target_features(&cfg, &theta, &x).unwrap();
    let pre = VisionPretrain { cfg: &cfg, images: &x, target: &target, lambda_spars: 0.0, lambda_tv: 0.0, keep_ratio: 0.5 };
    let meta: Vec<_> = task.meta.iter().collect();
    let subset = ParamSubset::vision_default(&cfg);
    let w = FeedbackWeights([(SEG_EVALUATOR.to_string(), 1.0), (DEPTH_EVALUATOR.to_string(), 1.0)].into());
    let g_down = down_gradient(&VisionDownstream { cfg: &cfg, heads: &heads, images: &meta }, &theta, &w).unwrap();
    let g_down = g_down.restrict(&subset_layout(&theta, &subset)).unwrap();
    let before = mask_meta_loss(&pre, &theta, &phi, &subset, &g_down).unwrap();
    let mut perturbed = heads.clone();
    let flat: Vec<f64> = perturbed.to_flat().iter().map(|v| v + 0.5).collect();
    perturbed.set_flat(&flat).unwrap();
    // the evaluator is rebuilt with new heads, but g_down is the constant input
    let _unused = VisionDownstream { cfg: &cfg, heads: &perturbed, images: &meta };
    let after = mask_meta_loss(&pre, &theta, &phi, &subset, &g_down).unwrap();
    assert_eq!(before.grad, after.grad);
    // regularizers off: the meta loss is exactly -V
    assert_eq!(before.loss, -before.v);
}

#[test]
fn random_feedback_is_seeded_norm_matched_and_directionless() {
    let layout = Layout::new([("a", vec![3, 4]), ("b", vec![5])]);
    let mk = |seed| random_feedback_vector::<f64>(&layout, 2.5, &mut ChaCha8Rng::seed_from_u64(seed));
    assert_eq!(mk(1), mk(1));
    assert!((mk(2).norm() - 2.5).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let unit = GradVector::new(layout.clone(), (0..17).map(|i| if i == 3 { 1.0 } else { 0.0 }).collect()).unwrap();
    let n = 10_000;
    let mean: f64 = (0..n).map(|_| random_feedback_vector::<f64>(&layout, 2.5, &mut rng).dot(&unit).unwrap()).sum::<f64>() / n as f64;
    assert!(mean.abs() < 4.0 / (n as f64).sqrt() * 2.5, "mean {mean}");
}
