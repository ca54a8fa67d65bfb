//! Projected (stochastic) gradient descent on F = h∘ψ + r over a product of balls.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::grad_objective;
use crate::chain::{Activation, ChainSpec, ParamVector};
use crate::error::{Error, Result};
use crate::objectives::{Objective, Regularizer};
use crate::smoothness::{grad_norm_at, objective_smoothness, propagate_chain, BoundedDomain};
use crate::tensor::Vector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepPolicy {
    /// γ = 1/L_F (full batch) or 1/(2L_F) (mini-batch) from the certified bound.
    Certified,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub domain: BoundedDomain,
    pub policy: StepPolicy,
    pub steps: usize,
    /// Mini-batch size; 0 means full batch.
    pub batch: usize,
    pub seed: u64,
    /// Stop once the gradient mapping norm is at most this.
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub value: f64,
    pub mapping_norm: f64,
    /// Whether the projection changed the plain gradient step.
    pub projected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub gamma: f64,
    /// Certified L_F when computed.
    pub smoothness: Option<f64>,
    /// Mean squared deviation of mini-batch gradients from the full one at u₀.
    pub variance: Option<f64>,
    pub final_params: ParamVector,
}

impl TrainTrace {
    pub fn min_mapping_norm(&self) -> f64 {
        self.rows.iter().map(|r| r.mapping_norm).fold(f64::INFINITY, f64::min)
    }

    /// CSV with columns iter, value, mapping_norm.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
        wr.write_record(["iter", "value", "mapping_norm"]).map_err(io)?;
        for r in &self.rows {
            wr.write_record([r.iter.to_string(), format!("{:e}", r.value), format!("{:e}", r.mapping_norm)]).map_err(io)?;
        }
        wr.flush().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        Ok(())
    }
}

/// Certified L_F on the domain, with ‖x₀‖ as input bound and u = 0 as reference point.
pub fn certified_smoothness(
    spec: &ChainSpec,
    h: &dyn Objective,
    r: Regularizer,
    x0: &Vector,
    dom: &BoundedDomain,
) -> Result<f64> {
    let dom = BoundedDomain::new(dom.radii.clone(), x0.norm())?;
    let psi = propagate_chain(spec, &dom)?.output();
    let grad_ref = grad_norm_at(spec, x0, &ParamVector::zeros(spec), h)?;
    let lf = objective_smoothness(psi, h.constants(), grad_ref, r.smoothness(), &dom);
    if lf.is_inf() {
        return Err(Error::Unbounded("objective smoothness on the domain; use smooth activations (softplus, avgpool)".into()));
    }
    Ok(lf.to_f64())
}

fn objective_value(spec: &ChainSpec, h: &dyn Objective, r: Regularizer, x0: &Vector, u: &ParamVector) -> Result<(f64, ParamVector)> {
    let (v, g) = grad_objective(spec, x0, u, h)?;
    let rv: f64 = u.blocks.iter().map(|b| r.value(b)).sum();
    let g = ParamVector { blocks: g.blocks.iter().zip(&u.blocks).map(|(gt, ut)| gt + r.grad(ut)).collect() };
    Ok((v + rv, g))
}

fn step_size(policy: StepPolicy, lf: Option<f64>, factor: f64) -> Result<f64> {
    match policy {
        StepPolicy::Fixed(g) if g > 0.0 && g.is_finite() => Ok(g),
        StepPolicy::Fixed(g) => Err(Error::Invalid(format!("step size must be positive and finite, got {g}"))),
        StepPolicy::Certified => Ok(1.0 / (factor * lf.expect("computed for certified policy"))),
    }
}

/// Full-batch projected gradient descent u⁺ = proj_C(u − γ∇F(u)).
pub fn train_pgd(
    spec: &ChainSpec,
    h: &dyn Objective,
    r: Regularizer,
    x0: &Vector,
    u0: &ParamVector,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    check_cfg(spec, cfg)?;
    let lf = match cfg.policy {
        StepPolicy::Certified => Some(certified_smoothness(spec, h, r, x0, &cfg.domain)?),
        StepPolicy::Fixed(_) => None,
    };
    let gamma = step_size(cfg.policy, lf, 1.0)?;
    let mut u = cfg.domain.project(u0);
    let mut rows = Vec::new();
    for k in 0..cfg.steps {
        let (value, g) = objective_value(spec, h, r, x0, &u)?;
        let (next, mapping, projected) = pg_step(&cfg.domain, &u, &g, gamma);
        rows.push(TraceRow { iter: k, value, mapping_norm: mapping, projected });
        if mapping <= cfg.tol {
            break;
        }
        u = next;
    }
    Ok(TrainTrace { rows, gamma, smoothness: lf, variance: None, final_params: u })
}

fn pg_step(dom: &BoundedDomain, u: &ParamVector, g: &ParamVector, gamma: f64) -> (ParamVector, f64, bool) {
    let plain = u.axpy(-gamma, g);
    let next = dom.project(&plain);
    let projected = next != plain;
    let mapping = u.axpy(-1.0, &next).norm() / gamma;
    (next, mapping, projected)
}

fn check_cfg(spec: &ChainSpec, cfg: &TrainConfig) -> Result<()> {
    if cfg.steps == 0 {
        return Err(Error::Invalid("iteration budget must be at least 1".into()));
    }
    if cfg.domain.radii.len() != spec.len() {
        return Err(Error::Invalid(format!("{} radii for {} layers", cfg.domain.radii.len(), spec.len())));
    }
    Ok(())
}

fn gather_rows(x: &Vector, idx: &[usize], d: usize) -> Vector {
    Vector::from_iterator(idx.len() * d, idx.iter().flat_map(|&i| x.as_slice()[i * d..(i + 1) * d].iter().copied()))
}

const VARIANCE_DRAWS: usize = 32;

/// Projected SGD with uniformly drawn, sorted mini-batches; the trace records
/// full-batch values and gradient mappings.
pub fn train_sgd(
    spec: &ChainSpec,
    h: &dyn Objective,
    r: Regularizer,
    x0: &Vector,
    u0: &ParamVector,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    check_cfg(spec, cfg)?;
    let n = spec.batch;
    let b = if cfg.batch == 0 { n } else { cfg.batch };
    if b > n {
        return Err(Error::Invalid(format!("mini-batch {b} larger than sample count {n}")));
    }
    if spec.layers.iter().any(|l| l.activations.iter().any(|a| matches!(a, Activation::BatchNorm { .. }))) {
        return Err(Error::Invalid("batch-norm couples samples; the objective is not a finite sum".into()));
    }
    if h.subset(&[0]).is_none() {
        return Err(Error::Invalid(format!("{} objective does not decompose per sample", h.name())));
    }
    let lf = match cfg.policy {
        StepPolicy::Certified => Some(certified_smoothness(spec, h, r, x0, &cfg.domain)?),
        StepPolicy::Fixed(_) => None,
    };
    let gamma = step_size(cfg.policy, lf, 2.0)?;
    let sub_spec = spec.with_batch(b)?;
    let d0 = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut idx = sample(rng, n, b).into_vec();
        idx.sort_unstable();
        idx
    };
    let stoch = |u: &ParamVector, idx: &[usize]| -> Result<ParamVector> {
        let hs = h.subset(idx).expect("checked above");
        Ok(objective_value(&sub_spec, hs.as_ref(), r, &gather_rows(x0, idx, d0), u)?.1)
    };

    let mut u = cfg.domain.project(u0);
    let (_, g0) = objective_value(spec, h, r, x0, &u)?;
    let mut var_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut var = 0.0;
    for _ in 0..VARIANCE_DRAWS {
        let idx = draw(&mut var_rng);
        var += stoch(&u, &idx)?.axpy(-1.0, &g0).norm().powi(2) / VARIANCE_DRAWS as f64;
    }

    let mut rows = Vec::new();
    for k in 0..cfg.steps {
        let (value, g) = objective_value(spec, h, r, x0, &u)?;
        let (_, mapping, projected) = pg_step(&cfg.domain, &u, &g, gamma);
        rows.push(TraceRow { iter: k, value, mapping_norm: mapping, projected });
        if mapping <= cfg.tol {
            break;
        }
        let idx = draw(&mut rng);
        let gs = stoch(&u, &idx)?;
        u = pg_step(&cfg.domain, &u, &gs, gamma).0;
    }
    Ok(TrainTrace { rows, gamma, smoothness: lf, variance: Some(var), final_params: u })
}
