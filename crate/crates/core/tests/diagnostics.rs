//! Verification checks of the value function's guarantees, and mutations
//! that must make them fail.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vbpt_core::diagnostics::quadratic::descent_slack;
use vbpt_core::diagnostics::surrogate::loglog_slope;
use vbpt_core::diagnostics::unbiased::two_point_set;
use vbpt_core::diagnostics::*;
use vbpt_core::trainer::ProbeRecord;
use vbpt_core::Error;

fn outcome(name: &str, faults: Faults) -> CheckOutcome {
    let o = run_check(name, faults).unwrap();
    println!("{name}: {} ({:.1}s) {}", if o.passed { "pass" } else { "fail" }, o.seconds, o.detail);
    o
}

#[test]
fn descent_bound_orthogonal_case_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tb = QuadraticTestbed::random(4, 3.0, &mut rng).unwrap();
    let theta = vec![0.3, -0.2, 0.5, 0.1];
    let g_down = tb.grad(&theta);
    let mut g_pre = vec![1.0, 0.0, 0.0, 0.0];
    let c = g_pre.iter().zip(&g_down).map(|(a, b)| a * b).sum::<f64>() / g_down.iter().map(|x| x * x).sum::<f64>();
    for (p, d) in g_pre.iter_mut().zip(&g_down) {
        *p -= c * d;
    }
    let eta = 0.2;
    let (slack, bound) = descent_slack(&tb, &theta, &g_pre, eta);
    let sq: f64 = g_pre.iter().map(|x| x * x).sum();
    assert!((bound + tb.l * eta * eta / 2.0 * sq).abs() < 1e-12);
    let realized = slack + bound;
    assert!((realized + eta * eta / 2.0 * tb.curvature(&g_pre)).abs() < 1e-12);
    assert!(slack >= 0.0);
    assert_eq!(descent_slack(&tb, &theta, &g_pre, 0.0), (0.0, 0.0));
}

#[test]
fn descent_bound_never_violated() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for l in [0.5, 1.0, 4.0] {
        let tb = QuadraticTestbed::random(6, l, &mut rng).unwrap();
        let rep = check_descent_bound(&tb, 10_000, 1.0 / tb.l, 1e-9, &mut rng);
        assert!(rep.passed(), "{rep:?}");
    }
    assert!(check_descent_equality(5, 1.0, 1000, &mut rng).unwrap() < 1e-12);
}

#[test]
fn quadratic_surrogate_residual_is_the_taylor_remainder() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tb = QuadraticTestbed::random(5, 2.0, &mut rng).unwrap();
    let inst = QuadraticInstance { tb: tb.clone(), theta: vec![0.1, 0.2, -0.3, 0.4, 0.0], g_pre: vec![1.0, -1.0, 0.5, 0.2, 0.3] };
    let etas = eta_grid(1e-1, 1e-4, 10);
    let rep = check_first_order_surrogate(&inst, &etas, Faults::none()).unwrap();
    let c = tb.curvature(&inst.g_pre);
    for (eta, r) in etas.iter().zip(&rep.residuals) {
        assert!((r - eta * eta / 2.0 * c).abs() <= 1e-12 * (1.0 + r), "{eta}: {r}");
    }
    assert!((rep.slope.unwrap() - 2.0).abs() < 1e-3);
    assert!(rep.passed());
}

#[test]
fn linear_loss_has_no_remainder() {
    let tb = QuadraticTestbed::new(3, vec![0.0; 9], vec![1.0, 2.0, -1.0]).unwrap();
    let inst = QuadraticInstance { tb, theta: vec![0.5, 0.5, 0.5], g_pre: vec![0.25, -0.5, 2.0] };
    let rep = check_first_order_surrogate(&inst, &eta_grid(1e-1, 1e-4, 6), Faults::none()).unwrap();
    assert!(rep.slope.is_none());
    assert!(rep.residuals.iter().all(|&r| r <= rep.noise_floor));
    assert!(rep.passed());
}

#[test]
fn surrogate_needs_three_step_sizes() {
    let tb = QuadraticTestbed::new(1, vec![1.0], vec![0.0]).unwrap();
    let inst = QuadraticInstance { tb, theta: vec![1.0], g_pre: vec![1.0] };
    assert!(matches!(check_first_order_surrogate(&inst, &[0.1, 0.01], Faults::none()), Err(Error::Insufficient(_))));
}

#[test]
fn transformer_surrogate_slope_is_quadratic() {
    let inst = TransformerInstance::toy(3).unwrap();
    let rep = check_first_order_surrogate(&inst, &eta_grid(1e-1, 1e-4, 10), Faults::none()).unwrap();
    println!("{rep:?}");
    let s = rep.slope.unwrap();
    assert!((1.8..=2.2).contains(&s), "slope {s}");
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn flipped_hvp_sign_fails_the_slope_check() {
    let clean = outcome("surrogate_slope", Faults::none());
    assert!(clean.passed, "{}", clean.detail);
    let broken = outcome("surrogate_slope", Faults { hvp_sign_flip: true });
    assert!(!broken.passed, "{}", broken.detail);
}

#[test]
fn minibatch_value_is_unbiased_on_three_seeds() {
    for seed in [1, 2, 3] {
        let (pre, down) = toy_example_gradients(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rep = check_unbiasedness(&pre, &down, 4, 4, 1000, &mut rng).unwrap();
        assert!(rep.se > 0.0);
        assert!(rep.passed(), "seed {seed}: {rep:?}");
    }
}

#[test]
fn full_batch_estimates_equal_the_full_value() {
    let (pre, down) = toy_example_gradients(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rep = check_unbiasedness(&pre, &down, pre.len(), down.len(), 5, &mut rng).unwrap();
    assert_eq!(rep.se, 0.0);
    assert_eq!(rep.mean, rep.v_full);
}

#[test]
fn degenerate_variance_is_reported() {
    let layout = vbpt_autodiff::Layout::new([("w", vec![2])]);
    let same = |v: Vec<f64>| vbpt_autodiff::GradVector::new(layout.clone(), v).unwrap();
    let pre = vec![same(vec![1.0, 2.0]); 6];
    let down = vec![same(vec![0.5, 0.5]); 6];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(check_unbiasedness(&pre, &down, 2, 2, 50, &mut rng), Err(Error::Insufficient(_))));
}

#[test]
fn dependent_sampling_is_biased_by_the_covariance_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = dependence_demo(&two_point_set(), 2000, &mut rng).unwrap();
    assert!(d.bias_detected(), "{d:?}");
}

fn probes(pairs: &[(f64, f64)]) -> Vec<ProbeRecord> {
    pairs.iter().enumerate().map(|(i, &(p, r))| ProbeRecord { step: i as u64, predicted: p, realized: r }).collect()
}

#[test]
fn probe_check_rejects_too_few_probes() {
    let few = probes(&vec![(1.0, 1.0); 29]);
    assert!(matches!(check_probe(&few, 10, 0), Err(Error::Insufficient(_))));
}

#[test]
fn quadratic_probes_correlate_perfectly_and_shuffles_do_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tb = QuadraticTestbed::random(6, 1.0, &mut rng).unwrap();
    let recs = quadratic_probes(&tb, 200, 1e-5, &mut rng);
    let rep = check_probe(&recs, 100, 1).unwrap();
    assert!(rep.r > 0.999, "{rep:?}");
    assert!(rep.shuffled_r.abs() < 0.15);
    assert!(rep.passed());
}

#[test]
fn loglog_slope_recovers_power() {
    let xs = eta_grid(1e-1, 1e-4, 8);
    let ys: Vec<f64> = xs.iter().map(|x| 0.7 * x.powi(3)).collect();
    assert!((loglog_slope(&xs, &ys).unwrap() - 3.0).abs() < 1e-10);
}

#[test]
fn overhead_window_rules() {
    let (value, _) = vbpt_core::diagnostics::suite::overhead_configs(2, 30);
    let data = vbpt_core::trainer::TaskData::for_config(&value).unwrap();
    assert!(matches!(measure_overhead(&value, &data, 20), Err(Error::Insufficient(_))));
    assert!(matches!(measure_overhead(&value, &data, 30), Err(Error::Insufficient(_))));
}

#[test]
fn unknown_check_is_a_config_error() {
    assert!(matches!(run_check("nope", Faults::none()), Err(Error::Config(_))));
}

#[test]
fn cheap_checks_pass() {
    for name in ["descent_bound", "unbiasedness", "meta_gradient", "regularizers", "decontamination"] {
        let o = outcome(name, Faults::none());
        assert!(o.passed, "{name}: {}", o.detail);
    }
}
