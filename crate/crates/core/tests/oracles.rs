mod common;

use chainopt::autodiff::{forward, grad_objective};
use chainopt::chain::{Activation, Affine, ChainSpec, Layer, ParamVector};
use chainopt::objectives::{Regularizer, SquaredLoss};
use chainopt::oracles::{build_lq, solve_dense_reference, solve_gauss_newton_dual, solve_gradient_step, solve_newton_dp, OracleKind};
use common::{normal, random_chain, random_point, Gen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rel(a: &ParamVector, b: &ParamVector) -> f64 {
    let (a, b) = (a.to_flat(), b.to_flat());
    (&a - &b).norm() / b.norm().max(1e-300)
}

fn gen() -> Gen {
    Gen { residual: true, ..Gen::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_oracle_is_scaled_negative_gradient(seed in any::<u64>(), gamma in 0.01f64..2.0, rho in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_chain(&mut rng, &gen());
        let (x0, u) = random_point(&mut rng, &spec, 1.0);
        let h = SquaredLoss::new(normal(&mut rng, spec.batch * spec.output_dim()), spec.batch).unwrap();
        let r = Regularizer::Ridge(rho);
        let tape = forward(&spec, &x0, &u).unwrap();
        let step = solve_gradient_step(&build_lq(&tape, &h, r, OracleKind::Gradient, 1.0 / gamma).unwrap(), gamma).unwrap();
        let (_, g) = grad_objective(&spec, &x0, &u, &h).unwrap();
        let want = (g.to_flat() + u.to_flat() * rho) * -gamma;
        prop_assert!((step.v.to_flat() - &want).norm() <= 1e-12 * (1.0 + want.norm()));
    }

    #[test]
    fn riccati_step_matches_dense_elimination(seed in any::<u64>(), kappa in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_chain(&mut rng, &gen());
        let (x0, u) = random_point(&mut rng, &spec, 1.0);
        let h = SquaredLoss::new(normal(&mut rng, spec.batch * spec.output_dim()), spec.batch).unwrap();
        let tape = forward(&spec, &x0, &u).unwrap();
        for kind in [OracleKind::GaussNewton, OracleKind::Newton] {
            let dp = solve_newton_dp(&build_lq(&tape, &h, Regularizer::Zero, kind, kappa).unwrap()).unwrap();
            let lq = build_lq(&tape, &h, Regularizer::Zero, kind, dp.kappa).unwrap();
            let dense = solve_dense_reference(&lq).unwrap();
            prop_assert!(rel(&dp.v, &dense.v) <= 1e-8);
        }
    }

    #[test]
    fn riccati_step_minimizes_the_model(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_chain(&mut rng, &gen());
        let (x0, u) = random_point(&mut rng, &spec, 1.0);
        let h = SquaredLoss::new(normal(&mut rng, spec.batch * spec.output_dim()), spec.batch).unwrap();
        let tape = forward(&spec, &x0, &u).unwrap();
        let lq = build_lq(&tape, &h, Regularizer::Zero, OracleKind::GaussNewton, 0.5).unwrap();
        let v = solve_newton_dp(&lq).unwrap().v;
        let best = lq.value(&v);
        for _ in 0..8 {
            let d = ParamVector { blocks: v.blocks.iter().map(|b| normal(&mut rng, b.len()) * 1e-3).collect() };
            prop_assert!(lq.value(&v.axpy(1.0, &d)) >= best - 1e-12 * (1.0 + best.abs()));
        }
    }

    #[test]
    fn dual_conjugate_gradient_matches_dense(seed in any::<u64>(), kappa in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_chain(&mut rng, &gen());
        let (x0, u) = random_point(&mut rng, &spec, 1.0);
        let h = SquaredLoss::new(normal(&mut rng, spec.batch * spec.output_dim()), spec.batch).unwrap();
        let tape = forward(&spec, &x0, &u).unwrap();
        let dense = solve_dense_reference(&build_lq(&tape, &h, Regularizer::Ridge(0.2), OracleKind::GaussNewton, kappa).unwrap()).unwrap();
        tape.reset_calls();
        let dual = solve_gauss_newton_dual(&tape, &h, Regularizer::Ridge(0.2), kappa).unwrap();
        prop_assert!(rel(&dual.v, &dense.v) <= 1e-6);
        prop_assert!(dual.calls <= 2 * tape.output().len() + 1);
    }
}

#[test]
fn gauss_newton_solves_linear_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, q, m) = (3, 2, 6);
    let layer = Layer::new(Affine::FullyConnected { inputs: d, outputs: q }, vec![Activation::Identity]);
    let spec = ChainSpec::new(d, m, vec![layer]).unwrap();
    let x0 = normal(&mut rng, m * d);
    let h = SquaredLoss::new(normal(&mut rng, m * q), m).unwrap();
    let u = ParamVector::zeros(&spec);
    let tape = forward(&spec, &x0, &u).unwrap();
    let v = solve_newton_dp(&build_lq(&tape, &h, Regularizer::Zero, OracleKind::GaussNewton, 1e-10).unwrap()).unwrap().v;
    let (_, g) = grad_objective(&spec, &x0, &u.axpy(1.0, &v), &h).unwrap();
    assert!(g.norm() < 1e-8, "{}", g.norm());
}

#[test]
fn newton_needs_twice_differentiable_layers() {
    let layer = Layer::new(Affine::FullyConnected { inputs: 2, outputs: 2 }, vec![Activation::Relu]);
    let spec = ChainSpec::new(2, 1, vec![layer]).unwrap();
    let x0 = chainopt::tensor::Vector::from_vec(vec![1.0, -1.0]);
    let h = SquaredLoss::new(chainopt::tensor::Vector::zeros(2), 1).unwrap();
    let tape = forward(&spec, &x0, &ParamVector::zeros(&spec)).unwrap();
    assert!(matches!(
        build_lq(&tape, &h, Regularizer::Zero, OracleKind::Newton, 1.0),
        Err(chainopt::Error::SecondOrderUnavailable(_))
    ));
    assert!(build_lq(&tape, &h, Regularizer::Zero, OracleKind::GaussNewton, 1.0).is_ok());
}
