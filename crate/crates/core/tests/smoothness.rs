mod common;

use chainopt::autodiff::forward;
use chainopt::chain::ParamVector;
use chainopt::smoothness::{chain_constants, generic_recursion, input_smoothness, propagate, propagate_chain, recenter_domain};
use chainopt::{BoundedDomain, Mag};
use common::{normal, random_chain, Gen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #[test]
    fn mag_arithmetic_matches_floats(a in 1e-6f64..1e6, b in 1e-6f64..1e6) {
        let (ma, mb) = (Mag::from_f64(a), Mag::from_f64(b));
        prop_assert!(close((ma + mb).to_f64(), a + b, 1e-13));
        prop_assert!(close((ma * mb).to_f64(), a * b, 1e-13));
        prop_assert!(close(ma.sqrt().to_f64(), a.sqrt(), 1e-13));
        prop_assert!(close(ma.sq().to_f64(), a * a, 1e-13));
        prop_assert!(close(ma.min(mb).to_f64(), a.min(b), 1e-14));
        prop_assert!(close(ma.max(mb).to_f64(), a.max(b), 1e-14));
    }

    #[test]
    fn mag_zero_and_infinity_absorb(a in 1e-6f64..1e6) {
        let ma = Mag::from_f64(a);
        prop_assert!((Mag::ZERO * Mag::INF).is_zero());
        prop_assert!((ma * Mag::INF).is_inf());
        prop_assert!((ma + Mag::INF).is_inf());
        prop_assert_eq!((ma + Mag::ZERO).ln(), ma.ln());
        prop_assert_eq!(ma.min(Mag::INF).ln(), ma.ln());
    }

    #[test]
    fn mag_survives_beyond_float_range(la in 700.0f64..5000.0, lb in 700.0f64..5000.0) {
        let p = Mag::from_ln(la) * Mag::from_ln(lb);
        prop_assert!(p.is_finite());
        prop_assert!(close(p.ln(), la + lb, 1e-14));
    }

    #[test]
    fn generic_recursion_matches_float_unrolling(ls in prop::collection::vec(0.1f64..3.0, 1..8), bs in prop::collection::vec(0.0f64..2.0, 8)) {
        let bs = &bs[..ls.len()];
        let (l, big) = generic_recursion(
            &ls.iter().map(|&x| Mag::from_f64(x)).collect::<Vec<_>>(),
            &bs.iter().map(|&x| Mag::from_f64(x)).collect::<Vec<_>>(),
        ).unwrap();
        let (mut fl, mut fb) = (0.0f64, 0.0f64);
        for (&lp, &bp) in ls.iter().zip(bs) {
            fb = fb * lp + bp * (1.0 + fl).powi(2);
            fl = lp + fl * lp;
        }
        prop_assert!(close(l.to_f64(), fl, 1e-12));
        prop_assert!(fb == 0.0 && big.is_zero() || close(big.to_f64(), fb, 1e-12));
    }

    #[test]
    fn projection_is_idempotent_and_feasible(seed in any::<u64>(), r in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_chain(&mut rng, &Gen::default());
        let dom = BoundedDomain::uniform(spec.len(), r, 1.0).unwrap();
        let u = ParamVector { blocks: spec.param_dims().into_iter().map(|p| normal(&mut rng, p) * 2.0).collect() };
        let pu = dom.project(&u);
        for b in &pu.blocks {
            prop_assert!(b.norm() <= r * (1.0 + 1e-12));
        }
        // Rescaling can land one ulp outside the ball; a second pass moves it by no more.
        prop_assert!((dom.project(&pu).to_flat() - pu.to_flat()).norm() <= 1e-14 * pu.norm());
        let inside = dom.project(&u.scale(1e-9));
        prop_assert_eq!(inside, u.scale(1e-9));
    }

    #[test]
    fn bounds_grow_with_radius(seed in any::<u64>(), r in 0.1f64..2.0, grow in 1.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_chain(&mut rng, &Gen { smooth: false, residual: true, ..Gen::default() });
        let small = propagate_chain(&spec, &BoundedDomain::uniform(spec.len(), r, 1.0).unwrap()).unwrap().output();
        let large = propagate_chain(&spec, &BoundedDomain::uniform(spec.len(), r * grow, 1.0).unwrap()).unwrap().output();
        prop_assert!(small.m.ln() <= large.m.ln() + 1e-12);
        prop_assert!(small.l.ln() <= large.l.ln() + 1e-12);
        prop_assert!(small.big_l.is_zero() || small.big_l.ln() <= large.big_l.ln() + 1e-12);
    }

    #[test]
    fn recentering_at_origin_changes_nothing(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_chain(&mut rng, &Gen::default());
        let c = chain_constants(&spec).unwrap();
        let dom = BoundedDomain::uniform(spec.len(), 1.0, 1.0).unwrap();
        let (shifted, dom2) = recenter_domain(&c, &ParamVector::zeros(&spec), dom.radii.clone(), 1.0).unwrap();
        prop_assert_eq!(propagate(&c, &dom).unwrap(), propagate(&shifted, &dom2).unwrap());
    }
}

#[test]
fn output_bound_holds_on_sampled_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let g = Gen { smooth: false, residual: true, softmax: true, ..Gen::default() };
    for _ in 0..60 {
        let spec = random_chain(&mut rng, &g);
        let r = rng.random_range(0.3..2.0);
        let dom = BoundedDomain::uniform(spec.len(), r, 1.0).unwrap();
        let b = propagate_chain(&spec, &dom).unwrap().output();
        for _ in 0..5 {
            let (x0, _) = common::random_point(&mut rng, &spec, 1.0);
            let u = ParamVector { blocks: spec.param_dims().into_iter().map(|p| common::in_ball(&mut rng, p, r)).collect() };
            let y = forward(&spec, &x0, &u).unwrap().output().norm();
            assert!(!b.m.is_finite() || y <= b.m.to_f64() * (1.0 + 1e-9), "{y} > {}", b.m);
        }
    }
}

#[test]
fn input_lipschitz_bound_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let g = Gen { smooth: false, residual: true, softmax: true, ..Gen::default() };
    for _ in 0..60 {
        let spec = random_chain(&mut rng, &g);
        let (_, u) = common::random_point(&mut rng, &spec, 1.0);
        let radius = 1.5;
        let t = input_smoothness(&spec, &u, radius).unwrap();
        let n = spec.batch * spec.input_dim;
        for _ in 0..5 {
            let a = common::in_ball(&mut rng, n, radius);
            let b = common::in_ball(&mut rng, n, radius);
            let fa = forward(&spec, &a, &u).unwrap().output().clone();
            let fb = forward(&spec, &b, &u).unwrap().output().clone();
            let ratio = (fa - fb).norm() / (a - b).norm();
            assert!(ratio <= t.l.to_f64() * (1.0 + 1e-9), "{ratio} > {}", t.l);
        }
    }
}

#[test]
fn mismatched_domain_is_rejected() {
    assert!(BoundedDomain::new(vec![1.0, -1.0], 1.0).is_err());
    assert!(BoundedDomain::new(vec![1.0], f64::NAN).is_err());
}
