//! Hessian-vector products and double backward.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbpt_autodiff::{GradOptions, GradVector, Graph, ParamSet, Tensor, Var};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn quadratic_loss(g: &Graph<f64>, th: &Var<f64>, a: &Tensor<f64>) -> Var<f64> {
    let n = th.shape()[0];
    let col = th.reshape(&[n, 1]).unwrap();
    let av = g.constant(a.clone()).matmul(&col).unwrap();
    col.dot(&av).unwrap().scale(0.5).unwrap()
}

#[test]
fn quadratic_hvp_is_matrix_vector_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 5;
    for _ in 0..10 {
        let m = randn(&mut rng, n * n);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = m[i * n + j] + m[j * n + i];
            }
        }
        let at = Tensor::new(a.clone(), &[n, n]).unwrap();
        let v = randn(&mut rng, n);
        let g = Graph::new();
        let th = g.param(Tensor::new(randn(&mut rng, n), &[n]).unwrap());
        let loss = quadratic_loss(&g, &th, &at);
        let set = ParamSet::new(vec![("theta".into(), th)]);
        let dir = GradVector::new(set.layout().clone(), v.clone()).unwrap();
        let hv = g.hvp(&loss, &set, &dir).unwrap();
        for i in 0..n {
            let expect: f64 = (0..n).map(|j| a[i * n + j] * v[j]).sum();
            assert!((hv.entries()[i] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn half_squared_norm_hvp_is_identity() {
    let g = Graph::new();
    let th = g.param(Tensor::from_f64(&[0.3, -2.0, 5.0], &[3]).unwrap());
    let loss = th.dot(&th).unwrap().scale(0.5).unwrap();
    let set = ParamSet::new(vec![("theta".into(), th)]);
    let v = GradVector::new(set.layout().clone(), vec![1.5, -0.25, 4.0]).unwrap();
    assert_eq!(g.hvp(&loss, &set, &v).unwrap().entries(), v.entries());
}

struct Mlp {
    w1: Tensor<f64>,
    b1: Tensor<f64>,
    w2: Tensor<f64>,
    x: Tensor<f64>,
    y: Tensor<f64>,
}

impl Mlp {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp {
            w1: Tensor::new(randn(&mut rng, 12), &[4, 3]).unwrap(),
            b1: Tensor::new(randn(&mut rng, 3), &[3]).unwrap(),
            w2: Tensor::new(randn(&mut rng, 6), &[3, 2]).unwrap(),
            x: Tensor::new(randn(&mut rng, 20), &[5, 4]).unwrap(),
            y: Tensor::new(randn(&mut rng, 10), &[5, 2]).unwrap(),
        }
    }

    fn build(&self, params: &[Tensor<f64>]) -> (Graph<f64>, ParamSet<f64>, Var<f64>) {
        let g = Graph::new();
        let names = ["w1", "b1", "w2"];
        let vars: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
        let h = g.constant(self.x.clone()).matmul(&vars[0]).unwrap().add(&vars[1]).unwrap().tanh().unwrap();
        let out = h.matmul(&vars[2]).unwrap();
        let loss = out.mse(&g.constant(self.y.clone())).unwrap();
        let set = ParamSet::new(names.iter().map(|n| n.to_string()).zip(vars).collect());
        (g, set, loss)
    }

    fn params(&self) -> Vec<Tensor<f64>> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone()]
    }

    fn grad_at(&self, params: &[Tensor<f64>]) -> GradVector<f64> {
        let (g, set, loss) = self.build(params);
        g.backward(&loss, &set, false).unwrap()
    }
}

fn shifted(params: &[Tensor<f64>], dir: &GradVector<f64>, eps: f64) -> Vec<Tensor<f64>> {
    params
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let d = dir.block_tensor(k).unwrap();
            p.zip_with(&d, "shift", |a, b| a + eps * b).unwrap()
        })
        .collect()
}

#[test]
fn mlp_hvp_matches_finite_difference_of_gradients() {
    for seed in 0..5 {
        let mlp = Mlp::new(seed);
        let params = mlp.params();
        let (g, set, loss) = mlp.build(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let v = GradVector::new(set.layout().clone(), randn(&mut rng, set.layout().total())).unwrap();
        let hv = g.hvp(&loss, &set, &v).unwrap();
        let eps = 1e-5;
        let plus = mlp.grad_at(&shifted(&params, &v, eps));
        let minus = mlp.grad_at(&shifted(&params, &v, -eps));
        let fd = plus.axpy(-1.0, &minus).unwrap().scale(1.0 / (2.0 * eps));
        let err = hv.axpy(-1.0, &fd).unwrap().norm() / fd.norm();
        assert!(err < 1e-6, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn hvp_is_deterministic() {
    let mlp = Mlp::new(9);
    let run = || {
        let (g, set, loss) = mlp.build(&mlp.params());
        let v = GradVector::new(set.layout().clone(), (0..set.layout().total()).map(|i| (i as f64).cos()).collect()).unwrap();
        g.hvp(&loss, &set, &v).unwrap().into_entries()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn graph_survives_hvp_for_later_backward() {
    let mlp = Mlp::new(2);
    let (g, set, loss) = mlp.build(&mlp.params());
    let v = GradVector::zeros(set.layout().clone());
    g.hvp(&loss, &set, &v).unwrap();
    let grad = g.backward(&loss, &set, false).unwrap();
    assert_eq!(grad, mlp.grad_at(&mlp.params()));
}

#[test]
fn meta_gradient_through_inner_product_of_gradients() {
    // value = <grad_theta L1(theta, phi), c>, d value / d phi by double backward,
    // checked against finite differences in phi.
    let theta = [0.4, -0.7, 1.1];
    let c = Tensor::from_f64(&[0.5, 1.0, -2.0], &[3]).unwrap();
    let eval = |phi: f64, grad_phi: bool| -> (f64, Option<f64>) {
        let g = Graph::new();
        let th = g.param(Tensor::from_f64(&theta, &[3]).unwrap());
        let ph = g.param(Tensor::from_f64(&[phi], &[1]).unwrap());
        let l1 = th.mul(&ph).unwrap().tanh().unwrap().square().unwrap().sum().unwrap();
        let gth = g.grad(&l1, &[&th], GradOptions::create_graph()).unwrap()[0].clone().unwrap();
        let value = gth.dot_const(&c).unwrap();
        let d = grad_phi.then(|| g.grad(&value, &[&ph], GradOptions::default()).unwrap()[0].clone().unwrap().item());
        (value.item(), d)
    };
    for &phi in &[-1.0, 0.3, 0.9] {
        let (_, d) = eval(phi, true);
        let h = 1e-6;
        let fd = (eval(phi + h, false).0 - eval(phi - h, false).0) / (2.0 * h);
        assert!((d.unwrap() - fd).abs() < 1e-7 * fd.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hvp_is_linear_and_symmetric(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let mlp = Mlp::new(seed);
        let (g, set, loss) = mlp.build(&mlp.params());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let n = set.layout().total();
        let u = GradVector::new(set.layout().clone(), randn(&mut rng, n)).unwrap();
        let w = GradVector::new(set.layout().clone(), randn(&mut rng, n)).unwrap();
        let hu = g.hvp(&loss, &set, &u).unwrap();
        let hw = g.hvp(&loss, &set, &w).unwrap();
        let combo = g.hvp(&loss, &set, &u.axpy(alpha, &w).unwrap()).unwrap();
        let expect = hu.axpy(alpha, &hw).unwrap();
        prop_assert!(combo.axpy(-1.0, &expect).unwrap().norm() <= 1e-10 * (1.0 + expect.norm()));
        let a = w.dot(&hu).unwrap();
        let b = u.dot(&hw).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }
}
