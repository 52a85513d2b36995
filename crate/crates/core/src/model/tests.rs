use super::*;
use crate::data::{Dataset, Role};
use crate::synth::{gaussians, GaussianSpec};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn pv(spec: &ModelSpec, values: Vec<f64>) -> ParamVector {
    ParamVector::new(values, Arc::new(spec.layout())).unwrap()
}

fn random_params(spec: &ModelSpec, seed: u64, scale: f64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = (0..spec.param_count()).map(|_| rng.random_range(-scale..scale)).collect();
    pv(spec, vals)
}

fn random_point(dim: usize, classes: usize, seed: u64) -> DataPoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let x = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    DataPoint::new(0, x, rng.random_range(0..classes))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// x with a trailing 1 for the bias coordinate of binary logistic regression.
fn augmented(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.push(1.0);
    v
}

fn separable() -> Dataset {
    let pts = vec![
        DataPoint::new(0, vec![-2.0, -1.0], 0),
        DataPoint::new(1, vec![-1.5, 0.5], 0),
        DataPoint::new(2, vec![-1.0, -0.5], 0),
        DataPoint::new(3, vec![1.0, 0.5], 1),
        DataPoint::new(4, vec![1.5, -0.5], 1),
        DataPoint::new(5, vec![2.0, 1.0], 1),
    ];
    Dataset::new(pts, 2, 2, Role::Train).unwrap()
}

#[test]
fn zero_params_give_uniform_loss() {
    let spec = ModelSpec::logistic(3, 2, 0.0);
    let z = DataPoint::new(0, vec![1.0, -2.0, 0.5], 1);
    let l = spec.loss(&spec.init_params(0).unwrap(), &z).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-15);

    let spec3 = ModelSpec::logistic(3, 3, 0.0);
    let z3 = DataPoint::new(0, vec![1.0, -2.0, 0.5], 2);
    let l3 = spec3.loss(&spec3.init_params(0).unwrap(), &z3).unwrap();
    assert!((l3 - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn fitted_one_dimensional_loss_matches_scalar_formula() {
    let spec = ModelSpec::logistic(1, 2, 0.1);
    let ds = Dataset::new(
        vec![DataPoint::new(0, vec![-1.0], 0), DataPoint::new(1, vec![2.0], 1)],
        1,
        2,
        Role::Train,
    )
    .unwrap();
    let fit = train(&spec, &ds, &TrainConfig::default()).unwrap();
    let (w, b) = (fit.params.values()[0], fit.params.values()[1]);
    for z in ds.points() {
        let a = w * z.x[0] + b;
        let y = z.y as f64;
        let expected = -(y * sigmoid(a).ln() + (1.0 - y) * (1.0 - sigmoid(a)).ln()) + 0.05 * (w * w + b * b);
        let got = spec.loss(&fit.params, z).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }
}

#[test]
fn loss_rejects_dimension_mismatch() {
    let spec = ModelSpec::logistic(3, 2, 0.0);
    let p = spec.init_params(0).unwrap();
    let bad = DataPoint::new(0, vec![1.0], 0);
    assert!(matches!(spec.loss(&p, &bad), Err(Error::Config(_))));
    let other = ModelSpec::logistic(4, 2, 0.0).init_params(0).unwrap();
    let z = DataPoint::new(0, vec![1.0, 2.0, 3.0], 0);
    assert!(matches!(spec.loss(&other, &z), Err(Error::Config(_))));
}

#[test]
fn logistic_gradient_closed_form() {
    let spec = ModelSpec::logistic(4, 2, 0.03);
    for seed in 0..10 {
        let p = random_params(&spec, seed, 1.0);
        let z = random_point(4, 2, seed);
        let g = spec.grad(&p, [&z]).unwrap();
        let xt = augmented(&z.x);
        let s = sigmoid(dot(p.values(), &xt));
        for i in 0..xt.len() {
            let want = (s - z.y as f64) * xt[i] + 0.03 * p.values()[i];
            assert!((g.values[i] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn gradient_vanishes_at_trained_optimum() {
    let spec = ModelSpec::logistic(2, 2, 0.01);
    let fit = train(&spec, &separable(), &TrainConfig::default()).unwrap();
    let g = spec.grad(&fit.params, separable().points()).unwrap();
    assert!(g.norm() <= 1e-8, "{}", g.norm());
    assert!(fit.grad_norm <= 1e-6);
}

fn specs_for_fd() -> Vec<ModelSpec> {
    vec![
        ModelSpec::logistic(3, 2, 0.01),
        ModelSpec::logistic(3, 4, 0.005),
        ModelSpec::mlp(3, 2, vec![4], Activation::Tanh, 0.005),
        ModelSpec::mlp(3, 3, vec![5, 3], Activation::Tanh, 0.02),
    ]
}

#[test]
fn hvp_of_pure_regularizer_is_scaled_identity() {
    // x = 0 with the bias frozen leaves only the regularizer's curvature.
    let spec = ModelSpec {
        frozen: vec!["layer0.bias".into()],
        ..ModelSpec::logistic(3, 2, 0.25)
    };
    let p = random_params(&spec, 3, 0.5);
    let z = DataPoint::new(0, vec![0.0, 0.0, 0.0], 1);
    let v = GradVector::new(vec![1.0, -2.0, 0.5, 0.0]);
    let hv = spec.hvp(&p, [&z], &v).unwrap();
    for i in 0..3 {
        assert!((hv.values[i] - 0.25 * v.values[i]).abs() < 1e-14);
    }
    assert_eq!(hv.values[3], 0.0);
}

#[test]
fn hvp_matches_dense_logistic_hessian() {
    let spec = ModelSpec::logistic(4, 2, 0.02);
    for seed in 0..10 {
        let p = random_params(&spec, seed, 1.0);
        let z = random_point(4, 2, seed + 100);
        let xt = augmented(&z.x);
        let s = sigmoid(dot(p.values(), &xt));
        let n = xt.len();
        let h = DMatrix::from_fn(n, n, |i, j| s * (1.0 - s) * xt[i] * xt[j] + if i == j { 0.02 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = &h * nalgebra::DVector::from_vec(v.clone());
        let got = spec.hvp(&p, [&z], &GradVector::new(v)).unwrap();
        for i in 0..n {
            assert!((got.values[i] - want[i]).abs() < 1e-8);
        }
    }
}

#[test]
fn hvp_is_linear() {
    for (k, spec) in specs_for_fd().into_iter().enumerate() {
        let p = random_params(&spec, k as u64, 0.7);
        let batch: Vec<DataPoint> = (0..3).map(|i| random_point(spec.dim, spec.classes, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = GradVector::new((0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let a = spec.hvp(&p, &batch, &v).unwrap().scaled(3.7);
        let b = spec.hvp(&p, &batch, &v.scaled(3.7)).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn logistic_hessian_eigenvalues_bounded_by_decay() {
    let (ds, _) = gaussians(
        &GaussianSpec { n: 40, dim: 5, classes: 2, separation: 2.0, label_noise: 0.1 },
        1,
        4,
    )
    .unwrap();
    let spec = ModelSpec::logistic(5, 2, 0.05);
    let p = train(&spec, &ds, &TrainConfig::default()).unwrap().params;
    let n = spec.param_count();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = spec.hvp(&p, ds.points(), &GradVector::new(e)).unwrap();
        for i in 0..n {
            h[(i, j)] = col.values[i];
        }
    }
    let eig = SymmetricEigen::new(h);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(min >= 0.05 - 1e-12, "{min}");
}

#[test]
fn exclude_decay_from_hessian() {
    let spec = ModelSpec {
        decay_in_hessian: false,
        ..ModelSpec::logistic(2, 2, 0.5)
    };
    let p = random_params(&spec, 1, 0.5);
    let z = DataPoint::new(0, vec![0.0, 0.0], 1);
    let v = GradVector::new(vec![1.0, 1.0, 0.0]);
    // x = 0 gives zero data curvature on the weight block.
    let hv = spec.hvp(&p, [&z], &v).unwrap();
    assert_eq!(&hv.values[..2], &[0.0, 0.0]);
}

#[test]
fn frozen_segments_mask_gradients() {
    let spec = ModelSpec {
        frozen: vec!["layer0.weight".into()],
        ..ModelSpec::mlp(3, 2, vec![4], Activation::Tanh, 0.01)
    };
    let p = spec.init_params(1).unwrap();
    let z = random_point(3, 2, 1);
    let g = spec.grad(&p, [&z]).unwrap();
    let seg = spec.layout().segment("layer0.weight").unwrap().clone();
    assert!(g.values[seg.offset..seg.offset + seg.len].iter().all(|v| *v == 0.0));
    assert!(g.values[seg.len..].iter().any(|v| *v != 0.0));
    let bad = ModelSpec {
        frozen: vec!["nope".into()],
        ..ModelSpec::logistic(2, 2, 0.0)
    };
    assert!(bad.validate().is_err());
}

#[test]
fn features_are_identity_for_logistic() {
    let spec = ModelSpec::logistic(3, 2, 0.0);
    let z = random_point(3, 2, 5);
    assert_eq!(spec.features(&random_params(&spec, 1, 1.0), &z).unwrap(), z.x);
}

#[test]
fn features_of_zero_mlp_are_zero() {
    for act in [Activation::Tanh, Activation::Relu] {
        let spec = ModelSpec::mlp(3, 2, vec![4, 6], act, 0.0);
        let p = pv(&spec, vec![0.0; spec.param_count()]);
        let f = spec.features(&p, &random_point(3, 2, 2)).unwrap();
        assert_eq!(f, vec![0.0; 6]);
    }
}

#[test]
fn mlp_features_match_standalone_forward_pass() {
    let spec = ModelSpec::mlp(3, 2, vec![4, 2], Activation::Tanh, 0.0);
    let p = spec.init_params(11).unwrap();
    let z = random_point(3, 2, 3);
    let w = p.values();
    // layer 0: 4x3 weights then 4 biases; layer 1: 2x4 then 2.
    let mut h1 = [0.0; 4];
    for o in 0..4 {
        let mut a = w[12 + o];
        for i in 0..3 {
            a += w[o * 3 + i] * z.x[i];
        }
        h1[o] = a.tanh();
    }
    let mut h2 = [0.0; 2];
    for o in 0..2 {
        let mut a = w[16 + 8 + o];
        for i in 0..4 {
            a += w[16 + o * 4 + i] * h1[i];
        }
        h2[o] = a.tanh();
    }
    let f = spec.features(&p, &z).unwrap();
    for i in 0..2 {
        assert!((f[i] - h2[i]).abs() < 1e-14);
    }
}

#[test]
fn training_is_deterministic() {
    let spec = ModelSpec::mlp(2, 2, vec![5], Activation::Tanh, 0.01);
    let cfg = TrainConfig { steps: 50, ..TrainConfig::default() };
    let a = train(&spec, &separable(), &cfg).unwrap();
    let b = train(&spec, &separable(), &cfg).unwrap();
    assert_eq!(a.params, b.params);
    let gd = TrainConfig { optimizer: Optimizer::GradientDescent, steps: 30, lr: 0.3, ..cfg };
    assert_eq!(train(&spec, &separable(), &gd).unwrap().params, train(&spec, &separable(), &gd).unwrap().params);
}

#[test]
fn duplicated_dataset_has_same_optimum() {
    let base = separable();
    let mut doubled = Vec::new();
    for (i, p) in base.points().iter().chain(base.points()).enumerate() {
        doubled.push(DataPoint::new(i, p.x.clone(), p.y));
    }
    let doubled = Dataset::new(doubled, 2, 2, Role::Train).unwrap();
    let spec = ModelSpec::logistic(2, 2, 0.01);
    let cfg = TrainConfig { tol: 1e-12, steps: 2000, ..TrainConfig::default() };
    let a = train(&spec, &base, &cfg).unwrap().params;
    let b = train(&spec, &doubled, &cfg).unwrap().params;
    for (x, y) in a.values().iter().zip(b.values()) {
        assert!((x - y).abs() < 1e-8);
    }
}

#[test]
fn training_rejects_non_train_role() {
    let ds = separable();
    let val = ds.select(&[0, 3], Role::Validation).unwrap();
    assert!(train(&ModelSpec::logistic(2, 2, 0.0), &val, &TrainConfig::default()).is_err());
}

#[test]
fn gradient_descent_divergence_reports_step() {
    // lr·λ_wd ≫ 2 makes every step overshoot until the parameters overflow.
    let spec = ModelSpec::logistic(2, 2, 1.0);
    let cfg = TrainConfig { optimizer: Optimizer::GradientDescent, steps: 500, lr: 1e3, ..TrainConfig::default() };
    match train(&spec, &separable(), &cfg) {
        Err(Error::Training { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn finetune_examples() {
    let spec = ModelSpec::logistic(2, 2, 0.01);
    let p = random_params(&spec, 2, 0.5);
    let ds = separable();
    let pts = &ds.points()[..2];
    assert_eq!(finetune(&spec, &p, pts, 0.0, 5).unwrap(), p);

    let one = finetune(&spec, &p, pts, 0.1, 1).unwrap();
    let g = spec.grad(&p, pts).unwrap();
    for i in 0..p.len() {
        assert!((one.values()[i] - (p.values()[i] - 0.1 * g.values[i])).abs() < 1e-12);
    }

    let z = &ds.points()[4];
    let before = spec.loss(&p, z).unwrap();
    let after = spec.loss(&finetune(&spec, &p, std::slice::from_ref(z), 1e-3, 1).unwrap(), z).unwrap();
    assert!(after < before);
    assert!(finetune(&spec, &p, &[], 0.1, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gradient_matches_central_differences(which in 0usize..4, seed in 0u64..10_000) {
        let spec = &specs_for_fd()[which];
        let p = random_params(spec, seed, 0.8);
        let z = random_point(spec.dim, spec.classes, seed);
        let g = spec.grad(&p, [&z]).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut e = vec![0.0; p.len()];
            e[i] = 1.0;
            let lp = spec.loss(&p.axpy(h, &e).unwrap(), &z).unwrap();
            let lm = spec.loss(&p.axpy(-h, &e).unwrap(), &z).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            prop_assert!(rel_err(g.values[i], fd) <= 1e-4, "coord {i}: {} vs {fd}", g.values[i]);
        }
    }

    #[test]
    fn hvp_matches_gradient_differences_and_is_symmetric(which in 0usize..4, seed in 0u64..10_000) {
        let spec = &specs_for_fd()[which];
        let p = random_params(spec, seed, 0.8);
        let batch: Vec<DataPoint> = (0..3).map(|i| random_point(spec.dim, spec.classes, seed + i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let v: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hv = spec.hvp(&p, &batch, &GradVector::new(v.clone())).unwrap();
        let eps = 1e-5;
        let gp = spec.grad(&p.axpy(eps, &v).unwrap(), &batch).unwrap();
        let gm = spec.grad(&p.axpy(-eps, &v).unwrap(), &batch).unwrap();
        for i in 0..p.len() {
            let fd = (gp.values[i] - gm.values[i]) / (2.0 * eps);
            prop_assert!(rel_err(hv.values[i], fd) <= 1e-4, "coord {i}: {} vs {fd}", hv.values[i]);
        }
        let hw = spec.hvp(&p, &batch, &GradVector::new(w.clone())).unwrap();
        prop_assert!((dot(&v, &hw.values) - dot(&w, &hv.values)).abs() < 1e-8);
    }
}

