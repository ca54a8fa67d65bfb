//! Gradient, Gauss-Newton and Newton oracles as linear-quadratic problems
//!
//!   min Σ_t ½y_tᵀP_ty_t + p_tᵀy_t + y_{t-1}ᵀR_tv_t + ½v_tᵀQ_tv_t + q_tᵀv_t + κ/2‖v_t‖²
//!   s.t. y_t = A_t y_{t-1} + B_t v_t,  y_0 = 0,
//!
//! solved by dynamic programming, by a dense reference elimination, or (for
//! Gauss-Newton) by conjugate gradient on the dual through autodiff calls.

use nalgebra::{Cholesky, SymmetricEigen};

use crate::autodiff::Tape;
use crate::chain::ParamVector;
use crate::error::{dim_err, Error, Result};
use crate::objectives::{Objective, Regularizer};
use crate::tensor::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Gradient,
    GaussNewton,
    Newton,
}

/// Data of stage t. `a` is d_t×d_{t-1}, `b` is d_t×p_t, `r` is d_{t-1}×p_t;
/// `p_mat`, `p_vec` weigh y_t.
#[derive(Debug, Clone, PartialEq)]
pub struct LqStage {
    pub a: Matrix,
    pub b: Matrix,
    pub p_mat: Matrix,
    pub p_vec: Vector,
    pub r: Matrix,
    pub q_mat: Matrix,
    pub q_vec: Vector,
}

impl LqStage {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn prev_dim(&self) -> usize {
        self.a.ncols()
    }
    pub fn param_dim(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    pub stages: Vec<LqStage>,
    pub kappa: f64,
}

impl LqProblem {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Invalid("LQ problem needs at least one stage".into()));
        }
        let mut prev = self.stages[0].prev_dim();
        for (t, s) in self.stages.iter().enumerate() {
            let (d, p) = (s.state_dim(), s.param_dim());
            let ok = s.prev_dim() == prev
                && s.b.nrows() == d
                && s.p_mat.shape() == (d, d)
                && s.p_vec.len() == d
                && s.r.shape() == (prev, p)
                && s.q_mat.shape() == (p, p)
                && s.q_vec.len() == p;
            if !ok {
                return dim_err(format!("LQ stage {} has inconsistent shapes", t + 1));
            }
            prev = d;
        }
        Ok(())
    }

    pub fn param_dims(&self) -> Vec<usize> {
        self.stages.iter().map(LqStage::param_dim).collect()
    }

    /// Objective value of the LQ problem at v.
    pub fn value(&self, v: &ParamVector) -> f64 {
        let mut y = Vector::zeros(self.stages[0].prev_dim());
        let mut total = 0.0;
        for (s, vt) in self.stages.iter().zip(&v.blocks) {
            total += y.dot(&(&s.r * vt)) + 0.5 * vt.dot(&(&s.q_mat * vt)) + s.q_vec.dot(vt) + 0.5 * self.kappa * vt.norm_squared();
            y = &s.a * &y + &s.b * vt;
            total += 0.5 * y.dot(&(&s.p_mat * &y)) + s.p_vec.dot(&y);
        }
        total
    }
}

/// An oracle's direction with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleStep {
    pub v: ParamVector,
    /// κ finally used (after doublings for Newton).
    pub kappa: f64,
    /// CG iterations or κ doublings.
    pub iterations: usize,
    /// Autodiff calls made by the solver.
    pub calls: usize,
    /// Dual objective at the returned dual point (Gauss-Newton only).
    pub dual_value: Option<f64>,
}

/// Builds the LQ problem of the chosen oracle around the tape's point.
pub fn build_lq(tape: &Tape, h: &dyn Objective, r: Regularizer, kind: OracleKind, kappa: f64) -> Result<LqProblem> {
    let spec = tape.spec();
    let u = tape.params();
    let tau = spec.len();
    let (_, grad_h) = h.eval(tape.output())?;
    let adjoints = if kind == OracleKind::Newton {
        if let Some(l) = spec.layers.iter().find(|l| !l.is_smooth()) {
            return Err(Error::SecondOrderUnavailable(l.describe()));
        }
        Some(tape.backward_full(&grad_h)?.adjoints)
    } else {
        None
    };

    let mut stages = Vec::with_capacity(tau);
    let mut hxx = Vec::with_capacity(tau);
    for (t, layer) in spec.layers.iter().enumerate() {
        let cache = &tape.caches()[t];
        let ut = u.blocks[t].as_slice();
        let (a, b) = layer.jacobians(cache, ut);
        let (d, prev, p) = (a.nrows(), a.ncols(), b.ncols());
        let mut q_mat = Matrix::zeros(p, p);
        let mut rmat = Matrix::zeros(prev, p);
        if kind != OracleKind::Gradient {
            q_mat += r.hessian(p);
        }
        if let Some(adj) = &adjoints {
            let so = layer.second_contract(cache, ut, adj[t + 1].as_slice())?;
            q_mat += so.uu;
            rmat = so.xu;
            hxx.push(so.xx);
        }
        stages.push(LqStage {
            a,
            b,
            p_mat: Matrix::zeros(d, d),
            p_vec: Vector::zeros(d),
            r: rmat,
            q_mat,
            q_vec: r.grad(&u.blocks[t]),
        });
    }
    // P_{t-1} from layer t; P_0 multiplies y_0 = 0 and is dropped.
    for (t, xx) in hxx.into_iter().enumerate().skip(1) {
        stages[t - 1].p_mat = xx;
    }
    let last = stages.last_mut().expect("non-empty");
    last.p_vec = grad_h;
    if kind != OracleKind::Gradient {
        last.p_mat += h.hessian(tape.output())?;
    }
    let lq = LqProblem { stages, kappa };
    lq.validate()?;
    Ok(lq)
}

/// v_t = −γ(q_t + B_tᵀλ_t) with λ_τ = p_τ, λ_{t-1} = A_tᵀλ_t + p_{t-1}.
pub fn solve_gradient_step(lq: &LqProblem, gamma: f64) -> Result<OracleStep> {
    lq.validate()?;
    let tau = lq.stages.len();
    let mut blocks = vec![Vector::zeros(0); tau];
    let mut lam = lq.stages[tau - 1].p_vec.clone();
    for t in (0..tau).rev() {
        let s = &lq.stages[t];
        blocks[t] = -(&s.q_vec + s.b.transpose() * &lam) * gamma;
        lam = s.a.transpose() * &lam;
        if t > 0 {
            lam += &lq.stages[t - 1].p_vec;
        }
    }
    Ok(OracleStep { v: ParamVector { blocks }, kappa: 1.0 / gamma, iterations: 0, calls: 0, dual_value: None })
}

pub const DEFAULT_DOUBLING_CAP: usize = 60;
const PIVOT_THRESHOLD: f64 = 1e-12;

fn spd_factor(m: Matrix) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let chol = Cholesky::new(sym)?;
    if chol.l_dirty().diagonal().iter().all(|&d| d * d > PIVOT_THRESHOLD) {
        Some(chol)
    } else {
        None
    }
}

/// Newton-type step by backward Riccati recursion and forward rollout,
/// doubling κ while a stage is not positive definite.
pub fn solve_newton_dp(lq: &LqProblem) -> Result<OracleStep> {
    solve_newton_dp_capped(lq, DEFAULT_DOUBLING_CAP)
}

pub fn solve_newton_dp_capped(lq: &LqProblem, cap: usize) -> Result<OracleStep> {
    lq.validate()?;
    if !(lq.kappa > 0.0) {
        return Err(Error::Invalid("kappa must be positive".into()));
    }
    let tau = lq.stages.len();
    let mut kappa = lq.kappa;
    for doubling in 0..=cap {
        if let Some(gains) = riccati(lq, kappa) {
            let mut y = Vector::zeros(lq.stages[0].prev_dim());
            let mut blocks = Vec::with_capacity(tau);
            for (s, (big_k, k)) in lq.stages.iter().zip(&gains) {
                let v = big_k * &y + k;
                y = &s.a * &y + &s.b * &v;
                blocks.push(v);
            }
            return Ok(OracleStep { v: ParamVector { blocks }, kappa, iterations: doubling, calls: 0, dual_value: None });
        }
        kappa *= 2.0;
    }
    Err(Error::Infeasible(cap))
}

/// Feedback gains (K_t, k_t), or None when some stage is not positive definite.
fn riccati(lq: &LqProblem, kappa: f64) -> Option<Vec<(Matrix, Vector)>> {
    let tau = lq.stages.len();
    let last = &lq.stages[tau - 1];
    let mut c_mat = last.p_mat.clone();
    let mut c_vec = last.p_vec.clone();
    let mut gains = vec![(Matrix::zeros(0, 0), Vector::zeros(0)); tau];
    for t in (0..tau).rev() {
        let s = &lq.stages[t];
        let p = s.param_dim();
        let bt_c = s.b.transpose() * &c_mat;
        let m = Matrix::identity(p, p) * kappa + &s.q_mat + &bt_c * &s.b;
        let chol = spd_factor(m)?;
        let n = s.r.transpose() + &bt_c * &s.a;
        let nv = &s.q_vec + s.b.transpose() * &c_vec;
        let big_k = -chol.solve(&n);
        let k = -chol.solve(&nv);
        let (p_prev, pv_prev) = if t > 0 {
            (lq.stages[t - 1].p_mat.clone(), lq.stages[t - 1].p_vec.clone())
        } else {
            (Matrix::zeros(s.prev_dim(), s.prev_dim()), Vector::zeros(s.prev_dim()))
        };
        let next_c = p_prev + s.a.transpose() * &c_mat * &s.a + n.transpose() * &big_k;
        c_vec = pv_prev + s.a.transpose() * &c_vec + n.transpose() * &k;
        c_mat = (&next_c + next_c.transpose()) * 0.5;
        gains[t] = (big_k, k);
    }
    Some(gains)
}

pub const DEFAULT_DENSE_CAP: usize = 2000;

/// Eliminates the dynamics y_t = M_t v and solves the reduced quadratic.
pub fn solve_dense_reference(lq: &LqProblem) -> Result<OracleStep> {
    solve_dense_reference_capped(lq, DEFAULT_DENSE_CAP)
}

pub fn solve_dense_reference_capped(lq: &LqProblem, cap: usize) -> Result<OracleStep> {
    lq.validate()?;
    let dims = lq.param_dims();
    let ptot: usize = dims.iter().sum();
    let dtot: usize = lq.stages[0].prev_dim() + lq.stages.iter().map(LqStage::state_dim).sum::<usize>();
    if ptot + dtot > cap {
        return Err(Error::CapExceeded(format!("dense reference needs {} > {cap} variables", ptot + dtot)));
    }
    let mut offsets = Vec::with_capacity(dims.len());
    let mut at = 0;
    for &d in &dims {
        offsets.push(at);
        at += d;
    }
    let mut hess = Matrix::zeros(ptot, ptot);
    let mut grad = Vector::zeros(ptot);
    let mut m_prev = Matrix::zeros(lq.stages[0].prev_dim(), ptot);
    for (t, s) in lq.stages.iter().enumerate() {
        let (o, p) = (offsets[t], s.param_dim());
        // Cross term y_{t-1}ᵀR_t v_t.
        let cross = m_prev.transpose() * &s.r;
        for j in 0..p {
            for i in 0..ptot {
                hess[(i, o + j)] += cross[(i, j)];
                hess[(o + j, i)] += cross[(i, j)];
            }
        }
        let mut blk = hess.view_mut((o, o), (p, p));
        blk += &s.q_mat + Matrix::identity(p, p) * lq.kappa;
        let mut gblk = grad.rows_mut(o, p);
        gblk += &s.q_vec;
        let mut m_t = &s.a * &m_prev;
        let mut cols = m_t.columns_mut(o, p);
        cols += &s.b;
        hess += m_t.transpose() * &s.p_mat * &m_t;
        grad += m_t.transpose() * &s.p_vec;
        m_prev = m_t;
    }
    let chol = spd_factor(hess).ok_or_else(|| Error::NotPositiveDefinite("reduced dense quadratic".into()))?;
    let v = -chol.solve(&grad);
    Ok(OracleStep { v: ParamVector::from_flat(v.as_slice(), &dims)?, kappa: lq.kappa, iterations: 0, calls: 0, dual_value: None })
}

/// Square-root factor G of a PSD Hessian (columns for positive eigenvalues only).
fn psd_factor(h: &Matrix) -> Result<(Matrix, Matrix, Vector)> {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lo < -1e-10 * top.max(f64::MIN_POSITIVE) {
        return Err(Error::Nonconvex(format!("objective Hessian has eigenvalue {lo:.3e}; no conjugate of its quadratic model")));
    }
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-12 * top).collect();
    let n = h.nrows();
    let mut basis = Matrix::zeros(n, keep.len());
    let mut g = Matrix::zeros(n, keep.len());
    let mut roots = Vector::zeros(keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let root = eig.eigenvalues[i].sqrt();
        basis.set_column(c, &eig.eigenvectors.column(i));
        g.set_column(c, &(eig.eigenvectors.column(i) * root));
        roots[c] = root;
    }
    Ok((g, basis, roots))
}

/// CG stopping rule: residual ≤ 1e-10 (1 + ‖rhs‖).
const CG_TOL: f64 = 1e-10;

/// Gauss-Newton step through the dual, using at most 2d_τ + 1 autodiff calls.
pub fn solve_gauss_newton_dual(tape: &Tape, h: &dyn Objective, r: Regularizer, kappa: f64) -> Result<OracleStep> {
    let calls0 = tape.calls();
    let s = kappa + r.rho();
    if !(s > 0.0) {
        return Err(Error::Invalid("kappa plus ridge weight must be positive".into()));
    }
    let y = tape.output();
    let (_, g) = h.eval(y)?;
    let (gfac, basis, roots) = psd_factor(&h.hessian(y)?)?;
    let (d_tau, rank) = (y.len(), gfac.ncols());
    let a = Vector::from_iterator(rank, (0..rank).map(|c| basis.column(c).dot(&g) / roots[c]));
    let g_perp = &g - &gfac * &a;

    let mut q = ParamVector { blocks: tape.params().blocks.iter().map(|b| r.grad(b)).collect() };
    if rank < d_tau && g_perp.norm() > 0.0 {
        q = q.axpy(1.0, &tape.backward(&g_perp)?);
    }
    let q_zero = q.norm() == 0.0;
    let rhs = if q_zero || rank == 0 { a.clone() } else { &a - gfac.transpose() * tape.jvp(&q.scale(1.0 / s))? };

    // (I + GᵀJS⁻¹JᵀG)θ = rhs, tracking w = JᵀGθ alongside θ.
    let mut theta = Vector::zeros(rank);
    let mut w = ParamVector { blocks: q.blocks.iter().map(|b| Vector::zeros(b.len())).collect() };
    let mut res = rhs.clone();
    let mut dir = res.clone();
    let mut rr = res.norm_squared();
    let stop = CG_TOL * (1.0 + rhs.norm());
    let mut iters = 0;
    while iters < rank && rr.sqrt() > stop {
        let w_dir = tape.backward(&(&gfac * &dir))?;
        let z = tape.jvp(&w_dir.scale(1.0 / s))?;
        let a_dir = &dir + gfac.transpose() * z;
        let alpha = rr / dir.dot(&a_dir);
        theta.axpy(alpha, &dir, 1.0);
        w = w.axpy(alpha, &w_dir);
        res.axpy(-alpha, &a_dir, 1.0);
        let rr_new = res.norm_squared();
        dir = &res + &dir * (rr_new / rr);
        rr = rr_new;
        iters += 1;
    }
    let wq = w.axpy(1.0, &q);
    let v = wq.scale(-1.0 / s);
    let dual_value = -0.5 * (&theta - &a).norm_squared() - 0.5 * wq.norm().powi(2) / s;
    Ok(OracleStep { v, kappa, iterations: iters, calls: tape.calls() - calls0, dual_value: Some(dual_value) })
}

/// Gauss-Newton model value q_h(Jv) + q_r(v) + κ/2‖v‖² (one tangent call).
pub fn gauss_newton_model(tape: &Tape, h: &dyn Objective, r: Regularizer, kappa: f64, v: &ParamVector) -> Result<f64> {
    let y = tape.output();
    let (_, g) = h.eval(y)?;
    let hess = h.hessian(y)?;
    let jv = tape.jvp(v)?;
    let lin: f64 = tape.params().blocks.iter().zip(&v.blocks).map(|(u, vt)| r.grad(u).dot(vt)).sum();
    Ok(0.5 * jv.dot(&(&hess * &jv)) + g.dot(&jv) + lin + 0.5 * (kappa + r.rho()) * v.norm().powi(2))
}
