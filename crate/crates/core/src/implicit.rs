//! Layers and objectives defined as the minimizer g(α) = argmin_β ζ(α, β)
//! of a strongly convex inner problem.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::objectives::Objective;
use crate::smoothness::{Mag, SmoothTriple};
use crate::tensor::{operator_norm, Matrix, Vector};

/// Declared constants of an inner problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerConstants {
    /// Strong convexity of ζ(α, ·).
    pub mu: f64,
    /// Gradient Lipschitz constant L_ζ of ζ jointly in (α, β).
    pub l: f64,
    /// Hessian Lipschitz constant H_ζ.
    pub h: f64,
    /// Lipschitz constant of ∇_β ζ(α, ·), used as the solver step 1/l_beta.
    pub l_beta: f64,
}

/// A smooth, strongly convex inner problem ζ(α, β).
pub trait InnerProblem: Send + Sync {
    fn alpha_dim(&self) -> usize;
    fn beta_dim(&self) -> usize;
    fn value(&self, alpha: &Vector, beta: &Vector) -> f64;
    fn grad_beta(&self, alpha: &Vector, beta: &Vector) -> Vector;
    fn grad_alpha(&self, alpha: &Vector, beta: &Vector) -> Vector;
    fn hess_beta_beta(&self, alpha: &Vector, beta: &Vector) -> Matrix;
    /// ∇²_{αβ}ζ, α × β.
    fn hess_alpha_beta(&self, alpha: &Vector, beta: &Vector) -> Matrix;
    fn constants(&self) -> InnerConstants;
}

/// Approximate minimizer with its accuracy certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub beta: Vector,
    pub grad_norm: f64,
    /// ‖β̂ − g(α)‖ ≤ ‖∇_βζ(α, β̂)‖/μ_ζ.
    pub error_bound: f64,
    pub iterations: usize,
}

pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Gradient descent with step 1/l_beta until ‖∇_βζ‖ ≤ tol.
pub fn solve_inner(p: &dyn InnerProblem, alpha: &Vector, tol: f64, init: Option<&Vector>) -> Result<InnerSolution> {
    solve_inner_capped(p, alpha, tol, init, DEFAULT_MAX_ITER)
}

pub fn solve_inner_capped(
    p: &dyn InnerProblem,
    alpha: &Vector,
    tol: f64,
    init: Option<&Vector>,
    max_iter: usize,
) -> Result<InnerSolution> {
    if alpha.len() != p.alpha_dim() {
        return dim_err(format!("inner problem expects alpha of length {}, got {}", p.alpha_dim(), alpha.len()));
    }
    if !(tol > 0.0) {
        return Err(Error::Invalid("inner tolerance must be positive".into()));
    }
    let c = p.constants();
    let mut beta = init.cloned().unwrap_or_else(|| Vector::zeros(p.beta_dim()));
    let step = 1.0 / c.l_beta;
    for it in 0..=max_iter {
        let g = p.grad_beta(alpha, &beta);
        let gn = g.norm();
        if gn <= tol {
            return Ok(InnerSolution { beta, grad_norm: gn, error_bound: gn / c.mu, iterations: it });
        }
        if it == max_iter {
            break;
        }
        beta.axpy(-step, &g, 1.0);
    }
    Err(Error::IterationCap(max_iter))
}

/// −∇²_{αβ}ζ(α, β̂) [∇²_{ββ}ζ(α, β̂)]⁻¹ (α × β).
pub fn implicit_gradient(p: &dyn InnerProblem, alpha: &Vector, beta: &Vector) -> Result<Matrix> {
    let hbb = p.hess_beta_beta(alpha, beta);
    let chol = Cholesky::new(hbb)
        .ok_or_else(|| Error::NotPositiveDefinite("inner Hessian in beta; strong convexity violated".into()))?;
    // X Hββ = Hαβ  ⇔  Hββ Xᵀ = Hαβᵀ (Hββ symmetric).
    let xt = chol.solve(&p.hess_alpha_beta(alpha, beta).transpose());
    Ok(-xt.transpose())
}

/// Bound on ‖∇̂ĝ − ∇g‖ when ‖β̂ − g(α)‖ ≤ e.
pub fn gradient_error_bound(c: &InnerConstants, e: f64) -> f64 {
    c.h / c.mu * (1.0 + c.l / c.mu) * e
}

/// (m, ℓ, L) of g: ℓ_g = L_ζ/μ_ζ, L_g = H_ζ μ_ζ^{-1}(1 + L_ζ μ_ζ^{-1})².
pub fn implicit_smoothness(p: &dyn InnerProblem) -> SmoothTriple {
    let c = p.constants();
    let r = c.l / c.mu;
    SmoothTriple { m: Mag::INF, l: Mag::from_f64(r), big_l: Mag::from_f64(c.h / c.mu * (1.0 + r) * (1.0 + r)) }
}

/// Spot-checks the declared constants at random points; returns warnings.
pub fn audit(p: &dyn InnerProblem, probes: usize, seed: u64) -> Vec<String> {
    let c = p.constants();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut rand_vec = |n: usize| Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    for _ in 0..probes {
        let (a, b1, b2) = (rand_vec(p.alpha_dim()), rand_vec(p.beta_dim()), rand_vec(p.beta_dim()));
        let h1 = p.hess_beta_beta(&a, &b1);
        let eig = SymmetricEigen::new(h1.clone()).eigenvalues;
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if lo < c.mu * (1.0 - 1e-9) {
            warnings.push(format!("strong convexity: eigenvalue {lo:.3e} below declared mu {:.3e}", c.mu));
        }
        if operator_norm(&h1) > c.l_beta * (1.0 + 1e-9) {
            warnings.push(format!("beta-block Hessian norm {:.3e} exceeds l_beta {:.3e}", operator_norm(&h1), c.l_beta));
        }
        let dist = (&b1 - &b2).norm();
        if dist > 0.0 {
            let ratio = operator_norm(&(h1 - p.hess_beta_beta(&a, &b2))) / dist;
            if ratio > c.h * (1.0 + 1e-9) + 1e-12 {
                warnings.push(format!("Hessian variation {ratio:.3e} exceeds declared H {:.3e}", c.h));
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    warnings
}

/// g(α) wrapped as a chain component, solved to tolerance `tol`.
#[derive(Clone)]
pub struct ImplicitMap {
    pub problem: Arc<dyn InnerProblem>,
    pub tol: f64,
}

impl fmt::Debug for ImplicitMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImplicitMap {{ alpha: {}, beta: {}, tol: {} }}", self.alpha_dim(), self.beta_dim(), self.tol)
    }
}

impl PartialEq for ImplicitMap {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.problem, &other.problem) && self.tol == other.tol
    }
}

impl ImplicitMap {
    pub fn new(problem: Arc<dyn InnerProblem>, tol: f64) -> Self {
        Self { problem, tol }
    }
    pub fn alpha_dim(&self) -> usize {
        self.problem.alpha_dim()
    }
    pub fn beta_dim(&self) -> usize {
        self.problem.beta_dim()
    }

    /// (ĝ(α), ∇̂ĝ(α)).
    pub fn value_and_gradient(&self, alpha: &Vector) -> Result<(Vector, Matrix)> {
        let sol = solve_inner(self.problem.as_ref(), alpha, self.tol, None)?;
        let grad = implicit_gradient(self.problem.as_ref(), alpha, &sol.beta)?;
        Ok((sol.beta, grad))
    }

    /// ‖g(0)‖ and ‖∇g(0)‖, computed numerically.
    pub fn values_at_zero(&self) -> Result<(f64, f64)> {
        let (b, g) = self.value_and_gradient(&Vector::zeros(self.alpha_dim()))?;
        Ok((b.norm(), operator_norm(&g)))
    }
}

/// ζ(α, β) = ½‖β − Mα‖²; g(α) = Mα.
#[derive(Debug, Clone)]
pub struct QuadraticInner {
    pub m: Matrix,
}

impl InnerProblem for QuadraticInner {
    fn alpha_dim(&self) -> usize {
        self.m.ncols()
    }
    fn beta_dim(&self) -> usize {
        self.m.nrows()
    }
    fn value(&self, a: &Vector, b: &Vector) -> f64 {
        0.5 * (b - &self.m * a).norm_squared()
    }
    fn grad_beta(&self, a: &Vector, b: &Vector) -> Vector {
        b - &self.m * a
    }
    fn grad_alpha(&self, a: &Vector, b: &Vector) -> Vector {
        -(self.m.transpose() * (b - &self.m * a))
    }
    fn hess_beta_beta(&self, _: &Vector, _: &Vector) -> Matrix {
        Matrix::identity(self.beta_dim(), self.beta_dim())
    }
    fn hess_alpha_beta(&self, _: &Vector, _: &Vector) -> Matrix {
        -self.m.transpose()
    }
    fn constants(&self) -> InnerConstants {
        let n = operator_norm(&self.m);
        InnerConstants { mu: 1.0, l: 1.0 + n * n, h: 0.0, l_beta: 1.0 }
    }
}

/// ζ(α, β) = ½βᵀHβ − αᵀβ with H ≻ 0; g(α) = H⁻¹α.
#[derive(Debug, Clone)]
pub struct LinearInner {
    pub h: Matrix,
}

impl InnerProblem for LinearInner {
    fn alpha_dim(&self) -> usize {
        self.h.nrows()
    }
    fn beta_dim(&self) -> usize {
        self.h.nrows()
    }
    fn value(&self, a: &Vector, b: &Vector) -> f64 {
        0.5 * b.dot(&(&self.h * b)) - a.dot(b)
    }
    fn grad_beta(&self, a: &Vector, b: &Vector) -> Vector {
        &self.h * b - a
    }
    fn grad_alpha(&self, _: &Vector, b: &Vector) -> Vector {
        -b
    }
    fn hess_beta_beta(&self, _: &Vector, _: &Vector) -> Matrix {
        self.h.clone()
    }
    fn hess_alpha_beta(&self, _: &Vector, _: &Vector) -> Matrix {
        -Matrix::identity(self.alpha_dim(), self.beta_dim())
    }
    fn constants(&self) -> InnerConstants {
        let eig = SymmetricEigen::new(self.h.clone()).eigenvalues;
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Joint Hessian [[0, −I], [−I, H]] has eigenvalues (h ± √(h² + 4))/2.
        InnerConstants { mu: lo, l: (hi + (hi * hi + 4.0).sqrt()) / 2.0, h: 0.0, l_beta: hi }
    }
}

/// ζ(α, β) = ½‖β − Mα‖² + ρ Σ log cosh β_i.
#[derive(Debug, Clone)]
pub struct LogCoshInner {
    pub m: Matrix,
    pub rho: f64,
}

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl InnerProblem for LogCoshInner {
    fn alpha_dim(&self) -> usize {
        self.m.ncols()
    }
    fn beta_dim(&self) -> usize {
        self.m.nrows()
    }
    fn value(&self, a: &Vector, b: &Vector) -> f64 {
        0.5 * (b - &self.m * a).norm_squared() + self.rho * b.iter().map(|&v| log_cosh(v)).sum::<f64>()
    }
    fn grad_beta(&self, a: &Vector, b: &Vector) -> Vector {
        b - &self.m * a + b.map(|v| self.rho * v.tanh())
    }
    fn grad_alpha(&self, a: &Vector, b: &Vector) -> Vector {
        -(self.m.transpose() * (b - &self.m * a))
    }
    fn hess_beta_beta(&self, _: &Vector, b: &Vector) -> Matrix {
        let d = b.map(|v| {
            let t = v.tanh();
            1.0 + self.rho * (1.0 - t * t)
        });
        Matrix::from_diagonal(&d)
    }
    fn hess_alpha_beta(&self, _: &Vector, _: &Vector) -> Matrix {
        -self.m.transpose()
    }
    fn constants(&self) -> InnerConstants {
        let n = operator_norm(&self.m);
        InnerConstants {
            mu: 1.0,
            l: 1.0 + n * n + self.rho,
            h: self.rho * 4.0 / (3.0 * 3f64.sqrt()),
            l_beta: 1.0 + self.rho,
        }
    }
}

/// Terminal objective h(α) = min_β ζ(α, β) applied per sample, averaged;
/// ∇h(α) = ∇_αζ(α, g(α)).
#[derive(Clone)]
pub struct ImplicitObjective {
    pub problem: Arc<dyn InnerProblem>,
    pub samples: usize,
    pub tol: f64,
}

impl Objective for ImplicitObjective {
    fn name(&self) -> &'static str {
        "implicit"
    }
    fn samples(&self) -> usize {
        self.samples
    }
    fn input_dim(&self) -> usize {
        self.samples * self.problem.alpha_dim()
    }
    fn eval(&self, y: &Vector) -> Result<(f64, Vector)> {
        let q = self.problem.alpha_dim();
        if y.len() != self.samples * q {
            return dim_err(format!("implicit objective expects {} values, got {}", self.samples * q, y.len()));
        }
        let n = self.samples as f64;
        let mut value = 0.0;
        let mut grad = Vector::zeros(y.len());
        for s in 0..self.samples {
            let a = Vector::from_column_slice(&y.as_slice()[s * q..(s + 1) * q]);
            let sol = solve_inner(self.problem.as_ref(), &a, self.tol, None)?;
            value += self.problem.value(&a, &sol.beta) / n;
            grad.rows_mut(s * q, q).copy_from(&(self.problem.grad_alpha(&a, &sol.beta) / n));
        }
        Ok((value, grad))
    }
    fn constants(&self) -> (f64, f64) {
        let c = self.problem.constants();
        (f64::INFINITY, c.l * (1.0 + c.l / c.mu))
    }
}
