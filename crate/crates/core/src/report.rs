//! Smoothness reports, finite-difference gradient checks and oracle benchmarks.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arch::ArchFile;
use crate::autodiff::{forward, grad_objective};
use crate::chain::{Activation, Affine, ChainSpec, Layer, ParamVector};
use crate::error::{Error, Result};
use crate::objectives::{Objective, Regularizer, SquaredLoss};
use crate::oracles::{build_lq, solve_dense_reference, solve_gauss_newton_dual, solve_newton_dp, OracleKind};
use crate::smoothness::{chain_constants, propagate, LayerConstants, Mag, SmoothTriple};
use crate::tensor::Vector;

/// Per-layer constants and the propagated bounds after that layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub index: usize,
    pub description: String,
    pub constants: LayerConstants,
    pub bounds: SmoothTriple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothReport {
    pub rows: Vec<LayerRow>,
    pub output: SmoothTriple,
}

fn ln12(x: Mag) -> String {
    if x.is_inf() {
        "inf".into()
    } else if x.is_zero() {
        "-inf".into()
    } else {
        format!("{:.11e}", x.ln())
    }
}

impl SmoothReport {
    /// Table of catalog constants and natural logs of (m_t, ℓ_t, L_t).
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>3}  {:<44} {:>19} {:>19} {:>19}", "t", "layer", "ln m_t", "ln l_t", "ln L_t");
        for r in &self.rows {
            let a = &r.constants.affine;
            let _ = writeln!(
                s,
                "{:>3}  {:<44} {:>19} {:>19} {:>19}",
                r.index,
                r.description,
                ln12(r.bounds.m),
                ln12(r.bounds.l),
                ln12(r.bounds.big_l)
            );
            let _ = writeln!(s, "     affine lb={:.12e} lu={:.12e} lx={:.12e} b0={:.12e}", a.lb, a.lu, a.lx, a.b0);
            for c in &r.constants.activations {
                let _ = writeln!(
                    s,
                    "     act m={:.12e} l={:.12e} L={:.12e} grad0={:.12e} val0={:.12e}",
                    c.m, c.l, c.big_l, c.grad0, c.val0
                );
            }
        }
        let _ = writeln!(
            s,
            "output ln m={} ln l={} ln L={}",
            ln12(self.output.m),
            ln12(self.output.l),
            ln12(self.output.big_l)
        );
        s
    }
}

pub fn smoothness_report(arch: &ArchFile) -> Result<SmoothReport> {
    let constants = chain_constants(&arch.spec)?;
    let prop = propagate(&constants, &arch.domain)?;
    let rows = arch
        .spec
        .layers
        .iter()
        .zip(constants)
        .zip(&prop.layers)
        .enumerate()
        .map(|(t, ((l, c), b))| LayerRow { index: t + 1, description: l.describe(), constants: c, bounds: *b })
        .collect();
    Ok(SmoothReport { rows, output: prop.output() })
}

/// ln a − ln b for each of (m, ℓ, L).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub dm: f64,
    pub dl: f64,
    pub dbig_l: f64,
}

pub fn compare(a: &SmoothTriple, b: &SmoothTriple) -> Comparison {
    let d = |x: Mag, y: Mag| if x == y { 0.0 } else { x.ln() - y.ln() };
    Comparison { dm: d(a.m, b.m), dl: d(a.l, b.l), dbig_l: d(a.big_l, b.big_l) }
}

/// One gradient-check row: directional derivative vs central difference.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    /// Layer index, or `None` for the end-to-end direction.
    pub layer: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale.max(1e-8)
    }
}

/// Seeded point with x₀ ~ N(0, 1/4) and u_t ~ N(0, I/p_t).
pub fn random_point(spec: &ChainSpec, rng: &mut ChaCha8Rng) -> (Vector, ParamVector) {
    let mut normal = |n: usize| Vector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let x0 = normal(spec.batch * spec.input_dim) * 0.5;
    let u = ParamVector {
        blocks: spec.param_dims().into_iter().map(|p| normal(p) / (p.max(1) as f64).sqrt()).collect(),
    };
    (x0, u)
}

/// Per-layer and end-to-end directional checks of ∇(h∘f) at a seeded point.
pub fn gradcheck(spec: &ChainSpec, h: &dyn Objective, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x0, u) = random_point(spec, &mut rng);
    let (_, g) = grad_objective(spec, &x0, &u, h)?;
    let value = |w: &ParamVector| -> Result<f64> { Ok(h.eval(forward(spec, &x0, w)?.output())?.0) };
    let eps = 1e-5;
    let mut rows = Vec::new();
    let mut directions: Vec<(Option<usize>, ParamVector)> = Vec::new();
    for t in 0..spec.len() {
        let mut d = ParamVector::zeros(spec);
        if d.blocks[t].is_empty() {
            continue;
        }
        d.blocks[t] = Vector::from_fn(d.blocks[t].len(), |_, _| StandardNormal.sample(&mut rng));
        directions.push((Some(t + 1), d));
    }
    let full = ParamVector {
        blocks: spec.param_dims().into_iter().map(|p| Vector::from_fn(p, |_, _| StandardNormal.sample(&mut rng))).collect(),
    };
    directions.push((None, full));
    for (layer, d) in directions {
        let n = d.norm();
        let d = d.scale(1.0 / n);
        let analytic: f64 = g.blocks.iter().zip(&d.blocks).map(|(a, b)| a.dot(b)).sum();
        let numeric = (value(&u.axpy(eps, &d))? - value(&u.axpy(-eps, &d))?) / (2.0 * eps);
        rows.push(CheckRow { layer, analytic, numeric, rel_error: relative_error(analytic, numeric) });
    }
    Ok(rows)
}

/// Softplus fully connected chain of `tau` layers of width `width`.
pub fn bench_chain(tau: usize, width: usize, batch: usize) -> Result<ChainSpec> {
    let layers =
        (0..tau).map(|_| Layer::new(Affine::FullyConnected { inputs: width, outputs: width }, vec![Activation::Softplus])).collect();
    ChainSpec::new(width, batch, layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub tau: usize,
    pub width: usize,
    pub dp_secs: f64,
    pub dual_secs: f64,
    pub dense_secs: f64,
    /// ‖v_DP − v_dense‖ / ‖v_dense‖ for the Newton model.
    pub dp_error: f64,
    /// ‖v_dual − v_dense‖ / ‖v_dense‖ for the Gauss-Newton model.
    pub dual_error: f64,
}

fn rel_dist(a: &ParamVector, b: &ParamVector) -> f64 {
    a.axpy(-1.0, b).norm() / b.norm().max(1e-300)
}

/// Times the DP, dual-CG and dense solvers on softplus chains and records agreement.
pub fn oracle_bench(taus: &[usize], width: usize, batch: usize, kappa: f64, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &tau in taus {
        let spec = bench_chain(tau, width, batch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tau as u64);
        let (x0, u) = random_point(&spec, &mut rng);
        let y = Vector::from_fn(batch * width, |_, _| StandardNormal.sample(&mut rng));
        let h = SquaredLoss::new(y, batch)?;
        let r = Regularizer::Zero;
        let tape = forward(&spec, &x0, &u)?;

        let lq = build_lq(&tape, &h, r, OracleKind::Newton, kappa)?;
        let t0 = Instant::now();
        let dp = solve_newton_dp(&lq)?;
        let dp_secs = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let dense = solve_dense_reference(&lq)?;
        let dense_secs = t0.elapsed().as_secs_f64();

        let gn_lq = build_lq(&tape, &h, r, OracleKind::GaussNewton, kappa)?;
        let gn_dense = solve_dense_reference(&gn_lq)?;
        let t0 = Instant::now();
        let dual = solve_gauss_newton_dual(&tape, &h, r, kappa)?;
        let dual_secs = t0.elapsed().as_secs_f64();

        rows.push(BenchRow {
            tau,
            width,
            dp_secs,
            dual_secs,
            dense_secs,
            dp_error: rel_dist(&dp.v, &dense.v),
            dual_error: rel_dist(&dual.v, &gn_dense.v),
        });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let e = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    wr.write_record(["tau", "width", "dp_secs", "dual_secs", "dense_secs", "dp_error", "dual_error"]).map_err(e)?;
    for r in rows {
        wr.write_record([
            r.tau.to_string(),
            r.width.to_string(),
            format!("{:e}", r.dp_secs),
            format!("{:e}", r.dual_secs),
            format!("{:e}", r.dense_secs),
            format!("{:e}", r.dp_error),
            format!("{:e}", r.dual_error),
        ])
        .map_err(e)?;
    }
    wr.flush().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(())
}
