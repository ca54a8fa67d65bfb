//! Acceptance checks, one line per criterion. Run with `cargo test --test acceptance`.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use chainopt::arch::{parse_file, ArchFile};
use chainopt::autodiff::{count_backward_cost, forward, grad_objective};
use chainopt::chain::{Activation, ChainSpec, ParamVector};
use chainopt::implicit::{gradient_error_bound, implicit_gradient, solve_inner, InnerProblem, LogCoshInner};
use chainopt::objectives::{ConvexClustering, LogisticLoss, Objective, Regularizer, SquaredLoss};
use chainopt::oracles::{build_lq, solve_dense_reference, solve_gauss_newton_dual, solve_newton_dp, OracleKind};
use chainopt::smoothness::{activation_constants, propagate_chain, BoundedDomain, Mag};
use chainopt::tensor::{Matrix, Vector};
use chainopt::trainer::{train_pgd, StepPolicy, TrainConfig};
use common::{fd_gradient, in_ball, jacobian, normal, random_chain, random_point, spectral_norm, Gen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rel(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn pv_rel(a: &ParamVector, b: &ParamVector) -> f64 {
    rel(&a.to_flat(), &b.to_flat())
}

fn squared_for(rng: &mut ChaCha8Rng, spec: &ChainSpec) -> SquaredLoss {
    let q = spec.output_dim();
    SquaredLoss::new(normal(rng, spec.batch * q), spec.batch).unwrap()
}

fn logistic_for(rng: &mut ChaCha8Rng, spec: &ChainSpec) -> LogisticLoss {
    let q = spec.output_dim();
    let classes: Vec<usize> = (0..spec.batch).map(|_| rng.random_range(0..q)).collect();
    LogisticLoss::from_classes(&classes, q).unwrap()
}

fn gradient_correctness() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let gen = Gen::default();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let spec = random_chain(&mut rng, &gen);
        let (x0, u) = random_point(&mut rng, &spec, 1.0);
        let h = squared_for(&mut rng, &spec);
        let (_, g) = grad_objective(&spec, &x0, &u, &h).unwrap();
        let fd = fd_gradient(&spec, &x0, &u, &h, 1e-5);
        worst = worst.max(rel(&g.to_flat(), &fd));
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(worst <= 1e-5 && secs < 10.0, format!("50 chains, max rel err {worst:.2e} (tol 1e-5), {secs:.2}s (limit 10s)"))
}

struct OracleStats {
    dp: f64,
    dual: f64,
    max_calls_over_budget: i64,
    worst_calls: String,
}

fn oracle_runs() -> OracleStats {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let gen = Gen { residual: true, ..Gen::default() };
    let (mut dp, mut dual) = (0.0f64, 0.0f64);
    let mut over = i64::MIN;
    let mut worst_calls = String::new();
    for i in 0..20 {
        let spec = random_chain(&mut rng, &gen);
        let (x0, u) = random_point(&mut rng, &spec, 1.0);
        let h: Box<dyn Objective> =
            if i % 2 == 0 { Box::new(squared_for(&mut rng, &spec)) } else { Box::new(logistic_for(&mut rng, &spec)) };
        let r = if i % 3 == 0 { Regularizer::Ridge(0.1) } else { Regularizer::Zero };
        let tape = forward(&spec, &x0, &u).unwrap();

        let lq = build_lq(&tape, h.as_ref(), r, OracleKind::Newton, 1.0).unwrap();
        let step = solve_newton_dp(&lq).unwrap();
        let lq_ref = build_lq(&tape, h.as_ref(), r, OracleKind::Newton, step.kappa).unwrap();
        dp = dp.max(pv_rel(&step.v, &solve_dense_reference(&lq_ref).unwrap().v));

        let gn = build_lq(&tape, h.as_ref(), r, OracleKind::GaussNewton, 1.0).unwrap();
        let reference = solve_dense_reference(&gn).unwrap();
        tape.reset_calls();
        let d = solve_gauss_newton_dual(&tape, h.as_ref(), r, 1.0).unwrap();
        dual = dual.max(pv_rel(&d.v, &reference.v));
        let budget = 2 * tape.output().len() + 1;
        let diff = d.calls as i64 - budget as i64;
        if diff > over {
            over = diff;
            worst_calls = format!("{} calls vs budget {budget}", d.calls);
        }
    }
    OracleStats { dp, dual, max_calls_over_budget: over, worst_calls }
}

fn oracle_equivalence(s: &OracleStats, secs: f64) -> Verdict {
    verdict(
        s.dp <= 1e-8 && s.dual <= 1e-6 && secs < 30.0,
        format!("DP vs dense {:.2e} (tol 1e-8), dual vs dense {:.2e} (tol 1e-6), 20+20 instances, {secs:.2}s", s.dp, s.dual),
    )
}

fn call_budget(s: &OracleStats) -> Verdict {
    verdict(s.max_calls_over_budget <= 0, format!("closest instance: {} (bound 2 d_tau + 1)", s.worst_calls))
}

fn smoothness_validity() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let gen = Gen { smooth: false, residual: true, softmax: true, batch: 2, ..Gen::default() };
    let (mut viol_l, mut viol_big, mut viol_m) = (0usize, 0usize, 0usize);
    let (mut worst_l, mut worst_big) = (0.0f64, 0.0f64);
    let mut finite_big = 0usize;
    let slack = 1.0 + 1e-9;
    for _ in 0..200 {
        let spec = random_chain(&mut rng, &gen);
        let radii: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(0.25..2.0)).collect();
        let norm = rng.random_range(0.25..2.0);
        let dom = BoundedDomain::new(radii.clone(), norm).unwrap();
        let b = propagate_chain(&spec, &dom).unwrap().output();
        let (x0, _) = random_point(&mut rng, &spec, norm);
        let dims = spec.param_dims();
        let smooth = b.big_l.is_finite();
        finite_big += smooth as usize;
        for _ in 0..200 {
            let mut draw = || ParamVector {
                blocks: dims.iter().zip(&radii).map(|(&p, &r)| in_ball(&mut rng, p, r)).collect(),
            };
            let (u, w) = (draw(), draw());
            let du = u.axpy(-1.0, &w).norm();
            if du == 0.0 {
                continue;
            }
            let (fu, ju, fw, jw) = if smooth {
                let (fu, ju) = jacobian(&spec, &x0, &u);
                let (fw, jw) = jacobian(&spec, &x0, &w);
                (fu, Some(ju), fw, Some(jw))
            } else {
                let fu = forward(&spec, &x0, &u).unwrap().output().clone();
                let fw = forward(&spec, &x0, &w).unwrap().output().clone();
                (fu, None, fw, None)
            };
            if b.m.is_finite() && fu.norm() > b.m.to_f64() * slack {
                viol_m += 1;
            }
            let ratio = Mag::from_f64((&fu - &fw).norm() / du);
            if b.l.is_finite() {
                worst_l = worst_l.max((ratio.ln() - b.l.ln()).exp());
                if ratio.ln() > b.l.ln() + slack.ln() {
                    viol_l += 1;
                }
            }
            if let (Some(ju), Some(jw)) = (ju, jw) {
                let gr = Mag::from_f64(spectral_norm(&(ju - jw)) / du);
                worst_big = worst_big.max((gr.ln() - b.big_l.ln()).exp());
                if gr.ln() > b.big_l.ln() + slack.ln() {
                    viol_big += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        viol_l + viol_big + viol_m == 0 && secs < 60.0,
        format!(
            "200 chains x 200 pairs: violations l {viol_l}, L {viol_big} ({finite_big} chains with finite L), m {viol_m}; \
             max ratio/bound l {worst_l:.3}, L {worst_big:.3}; {secs:.2}s"
        ),
    )
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn vgg_reproduction() -> Verdict {
    let t0 = Instant::now();
    let load = |n: &str| -> ArchFile { parse_file(fixture(n)).unwrap() };
    let out = |a: &ArchFile| propagate_chain(&a.spec, &a.domain).unwrap().output();
    let (vgg, smooth, batch) = (load("vgg16.arch"), load("vgg16-smooth.arch"), load("vgg16-batchnorm.arch"));
    for a in [&vgg, &smooth, &batch] {
        assert_eq!((a.spec.batch, a.spec.len(), a.domain.input_norm), (128, 16, 1.0));
        assert!(a.domain.radii.iter().all(|&r| r == 1.0));
    }
    let (v, s) = (out(&vgg), out(&smooth));
    // |ℓ_v − ℓ_s|/ℓ_v = |exp(ln ℓ_s − ln ℓ_v) − 1|.
    let rel_a = (s.l.ln() - v.l.ln()).exp_m1().abs();
    let a_ok = rel_a <= 1e-4;
    let at = |eps: f64| out(&batch.with_batchnorm_eps(eps).unwrap());
    let (b_lo, b_hi) = (at(1e-2), at(1e2));
    let b_ok = s.l.ln() <= b_lo.l.ln() && s.big_l.ln() <= b_lo.big_l.ln();
    let c_ok = s.l.ln() >= b_hi.l.ln() && s.big_l.ln() >= b_hi.big_l.ln();
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        a_ok && b_ok && c_ok && secs < 1.0,
        format!(
            "(a) {} rel l diff {rel_a:.4e} (tol 1e-4; ln l_VGG {:.11e}, ln l_smooth {:.11e}); \
             (b) eps=1e-2 {} (ln l_smooth - ln l_batch {:.4e}, ln L diff {:.4e}); \
             (c) eps=1e2 {} (ln l diff {:.4e}, ln L diff {:.4e}); {secs:.3}s",
            if a_ok { "pass" } else { "FAIL" },
            v.l.ln(),
            s.l.ln(),
            if b_ok { "pass" } else { "FAIL" },
            s.l.ln() - b_lo.l.ln(),
            s.big_l.ln() - b_lo.big_l.ln(),
            if c_ok { "pass" } else { "FAIL" },
            s.l.ln() - b_hi.l.ln(),
            s.big_l.ln() - b_hi.big_l.ln(),
        ),
    )
}

fn backward_cost() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let gen = Gen { smooth: false, residual: true, softmax: true, ..Gen::default() };
    let mut mismatches = Vec::new();
    let mut total = 0u64;
    for i in 0..10 {
        let spec = random_chain(&mut rng, &gen);
        let c = count_backward_cost(&spec, i).unwrap();
        total += c.backward;
        if c.backward != c.formula {
            mismatches.push(format!("#{i}: {} vs {}", c.backward, c.formula));
        }
    }
    verdict(mismatches.is_empty(), format!("10 chains, {total} multiplies counted, mismatches: {mismatches:?}"))
}

fn implicit_bound() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut violations = 0;
    let mut worst = 0.0f64;
    let mut smallest_e = f64::INFINITY;
    for _ in 0..30 {
        let (db, da) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let m = Matrix::from_fn(db, da, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
        let p = LogCoshInner { m, rho: rng.random_range(0.5..3.0) };
        let alpha = normal(&mut rng, da) * 2.0;
        let exact = solve_inner(&p, &alpha, 1e-13, None).unwrap();
        let g_exact = implicit_gradient(&p, &alpha, &exact.beta).unwrap();
        let c = p.constants();
        for k in 1..=6 {
            let approx = solve_inner(&p, &alpha, 10f64.powi(-k), None).unwrap();
            let e = (&approx.beta - &exact.beta).norm();
            smallest_e = smallest_e.min(e);
            let err = spectral_norm(&(implicit_gradient(&p, &alpha, &approx.beta).unwrap() - &g_exact));
            let bound = gradient_error_bound(&c, e);
            if err > bound {
                violations += 1;
            }
            if bound > 0.0 {
                worst = worst.max(err / bound);
            }
        }
    }
    verdict(
        violations == 0,
        format!("30 problems x 6 tolerances: {violations} violations, max err/bound {worst:.3}, smallest ||beta - g(alpha)|| {smallest_e:.1e}"),
    )
}

fn convergence() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let gen = Gen { batchnorm: false, max_tau: 3, max_dim: 4, batch: 4, ..Gen::default() };
    let (mut mono_fail, mut rate_fail) = (0, 0);
    let mut worst_rate = 0.0f64;
    let steps = 60;
    for _ in 0..10 {
        let spec = random_chain(&mut rng, &gen);
        let (x0, _) = random_point(&mut rng, &spec, 1.0);
        let h = squared_for(&mut rng, &spec);
        let dom = BoundedDomain::uniform(spec.len(), 1.0, x0.norm()).unwrap();
        let u0 = ParamVector { blocks: spec.param_dims().into_iter().map(|p| in_ball(&mut rng, p, 1.0)).collect() };
        let cfg = TrainConfig { domain: dom, policy: StepPolicy::Certified, steps, batch: 0, seed: 0, tol: 0.0 };
        let tr = train_pgd(&spec, &h, Regularizer::Zero, &x0, &u0, &cfg).unwrap();
        let vals: Vec<f64> = tr.rows.iter().map(|r| r.value).collect();
        if vals.windows(2).any(|w| w[1] > w[0]) {
            mono_fail += 1;
        }
        let lf = tr.smoothness.unwrap();
        let f_base = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let mut best = f64::INFINITY;
        for (k, r) in tr.rows.iter().enumerate() {
            best = best.min(r.mapping_norm.powi(2));
            let iters = k + 1;
            if iters >= 10 {
                let bound = 8.0 * lf * (vals[0] - f_base) / iters as f64;
                if best > bound {
                    rate_fail += 1;
                }
                if bound > 0.0 {
                    worst_rate = worst_rate.max(best / bound);
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        mono_fail == 0 && rate_fail == 0 && secs < 60.0,
        format!("10 instances x {steps} steps: {mono_fail} non-monotone traces, {rate_fail} rate violations, max ratio {worst_rate:.3}; {secs:.2}s"),
    )
}

fn softmax_ref(z: &[f64]) -> Vector {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = Vector::from_iterator(z.len(), z.iter().map(|v| (v - mx).exp()));
    let s = e.sum();
    e / s
}

fn softmax_jac(z: &Vector) -> Matrix {
    let s = softmax_ref(z.as_slice());
    Matrix::from_diagonal(&s) - &s * s.transpose()
}

/// Jacobian of (z − mean)/sqrt(var + eps) for one feature across the batch.
fn batchnorm_jac(z: &Vector, eps: f64) -> Matrix {
    let m = z.len() as f64;
    let c = z.add_scalar(-z.mean());
    let s = (c.norm_squared() / m + eps).sqrt();
    let xh = &c / s;
    let n = z.len();
    (Matrix::identity(n, n) - Matrix::from_element(n, n, 1.0 / m) - &xh * xh.transpose() / m) / s
}

/// max over random unit d of ‖(J(z + εd) − J(z − εd))/(2ε)‖.
fn fd_hessian_norm(rng: &mut ChaCha8Rng, z: &Vector, jac: &dyn Fn(&Vector) -> Matrix, dirs: usize, eps: f64) -> f64 {
    (0..dirs)
        .map(|_| {
            let d = normal(rng, z.len()).normalize();
            spectral_norm(&((jac(&(z + &d * eps)) - jac(&(z - &d * eps))) / (2.0 * eps)))
        })
        .fold(0.0, f64::max)
}

fn loss_constants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let probes = 1000;
    let scales = [1e-2, 1.0, 10.0];
    let mut report = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, g: f64, gl: f64, h: f64, hl: f64, pinned: (f64, f64), catalog: (f64, f64)| {
        let pass = g <= gl && h <= hl && catalog.0 <= pinned.0 && catalog.1 <= pinned.1;
        ok &= pass;
        report.push(format!("{name} grad {g:.3}/{gl:.3} hess {h:.3}/{hl:.3}"));
    };

    // Logistic, averaged over n samples of q classes.
    let (n, q) = (3, 4);
    let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..q)).collect();
    let lg = LogisticLoss::from_classes(&classes, q).unwrap();
    let (lc, hc) = lg.constants();
    let (mut g, mut h) = (0.0f64, 0.0f64);
    for i in 0..probes {
        let y = normal(&mut rng, n * q) * scales[i % 3];
        g = g.max(lg.eval(&y).unwrap().1.norm());
        let grad = |v: &Vector| lg.eval(v).unwrap().1;
        let eps = 1e-5;
        let fd = Matrix::from_fn(n * q, n * q, |r, c| {
            let mut e = Vector::zeros(n * q);
            e[c] = eps;
            (grad(&(&y + &e))[r] - grad(&(&y - &e))[r]) / (2.0 * eps)
        });
        h = h.max(spectral_norm(&fd));
    }
    check("logistic", g, lc, h, hc, (2.0, 2.0), (lc, hc));

    // Softmax activation on one sample.
    let (mut g, mut h) = (0.0f64, 0.0f64);
    let mut cat = (0.0, 0.0);
    for i in 0..probes {
        let q = 2 + i % 5;
        let c = activation_constants(&Activation::Softmax, q, 1).unwrap();
        cat = (c.l, c.big_l);
        let z = normal(&mut rng, q) * scales[i % 3];
        g = g.max(spectral_norm(&softmax_jac(&z)));
        h = h.max(fd_hessian_norm(&mut rng, &z, &softmax_jac, 4, 1e-5));
    }
    check("softmax", g, cat.0, h, cat.1, (2.0, 4.0), cat);

    // Batch-norm of one feature over m samples.
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    let mut bn_ok = true;
    for i in 0..probes {
        let m = 2 + i % 7;
        let eps = [1e-2, 1.0, 1e2][i % 3];
        let c = activation_constants(&Activation::BatchNorm { eps }, 1, m).unwrap();
        let pinned = (2.0 / eps.sqrt(), 2.0 / ((m as f64).sqrt() * eps));
        let spread = eps.sqrt() * [1e-3, 0.3, 3.0][(i / 3) % 3];
        let z = normal(&mut rng, m) * spread;
        let jac = |v: &Vector| batchnorm_jac(v, eps);
        let gn = spectral_norm(&jac(&z));
        let hn = fd_hessian_norm(&mut rng, &z, &jac, 4, spread * 1e-4);
        bn_ok &= gn <= c.l && hn <= c.big_l && c.l <= pinned.0 && c.big_l <= pinned.1;
        worst_g = worst_g.max(gn / c.l);
        worst_h = worst_h.max(hn / c.big_l);
    }
    ok &= bn_ok;
    report.push(format!("batchnorm max grad/l {worst_g:.3} hess/L {worst_h:.3}"));

    // Convex clustering: ∇h(ŷ) = ŷ − y*(ŷ) is 1-Lipschitz. The inner solve is
    // certified by its duality gap, ‖y − y*‖ ≤ sqrt(2 gap), which bounds the
    // error of each measured difference quotient.
    let (n, q) = (4, 2);
    let cc = ConvexClustering::new(n, q);
    let (lc, hc) = cc.constants();
    let (mut g, mut h) = (0.0f64, 0.0f64);
    let mut cl_ok = true;
    for i in 0..probes {
        let y = normal(&mut rng, n * q) * [0.1, 1.0, 10.0][i % 3];
        let s0 = cc.solve(&y).unwrap();
        let g0 = &y - &s0.y;
        g = g.max(g0.norm());
        let step = 0.1 * (1.0 + y.norm());
        let y1 = &y + normal(&mut rng, n * q).normalize() * step;
        let s1 = cc.solve(&y1).unwrap();
        let g1 = &y1 - &s1.y;
        let err = (2.0 * s0.gap.max(0.0)).sqrt() + (2.0 * s1.gap.max(0.0)).sqrt();
        let ratio = (&g1 - &g0).norm() / step;
        cl_ok &= ratio <= hc + err / step;
        h = h.max(ratio);
    }
    ok &= cl_ok && g <= lc && lc <= (n * (n - 1) / 2) as f64 && hc <= 1.0;
    report.push(format!("clustering grad {g:.3}/{lc:.0} hess {h:.6}/{hc:.0}"));

    verdict(ok, format!("{probes} probes each: {}", report.join("; ")))
}

fn main() {
    let mut results = Vec::new();
    results.push(("gradient correctness", gradient_correctness()));
    let t0 = Instant::now();
    let stats = oracle_runs();
    let secs = t0.elapsed().as_secs_f64();
    results.push(("oracle equivalence", oracle_equivalence(&stats, secs)));
    results.push(("Gauss-Newton call budget", call_budget(&stats)));
    results.push(("smoothness-bound validity", smoothness_validity()));
    results.push(("VGG constant comparison", vgg_reproduction()));
    results.push(("backward-cost accounting", backward_cost()));
    results.push(("implicit-gradient bound", implicit_bound()));
    results.push(("PGD convergence", convergence()));
    results.push(("loss-constant conformance", loss_constants()));

    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        println!("criterion {} {}: {} | {}", i + 1, name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += !v.pass as usize;
    }
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
