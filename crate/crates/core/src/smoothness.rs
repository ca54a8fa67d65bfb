//! Propagation of (m, ℓ, L) bounds through a chain, in log-magnitude
//! arithmetic so that deep networks do not overflow.

use std::fmt;
use std::ops::{Add, Mul};

use crate::chain::{Activation, Affine, ChainSpec, Layer, ParamVector};
use crate::error::{dim_err, Error, Result};
use crate::implicit::implicit_smoothness;
use crate::tensor::{operator_norm, tensor_norm_222, Matrix, Vector};

/// A nonnegative extended real stored as its natural log.
///
/// Products follow the convention 0·∞ = 0.
#[derive(Clone, Copy, PartialEq, PartialOrd)]
pub struct Mag(f64);

impl Mag {
    pub const ZERO: Mag = Mag(f64::NEG_INFINITY);
    pub const ONE: Mag = Mag(0.0);
    pub const INF: Mag = Mag(f64::INFINITY);

    /// From a nonnegative value; NaN maps to +∞ so that bounds stay valid.
    pub fn from_f64(x: f64) -> Mag {
        assert!(!(x < 0.0), "magnitudes are nonnegative, got {x}");
        if x.is_nan() {
            Mag::INF
        } else {
            Mag(x.ln())
        }
    }

    pub fn from_ln(l: f64) -> Mag {
        Mag(l)
    }

    pub fn ln(self) -> f64 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0.exp()
    }

    pub fn is_inf(self) -> bool {
        self.0 == f64::INFINITY
    }

    pub fn is_finite(self) -> bool {
        !self.is_inf()
    }

    pub fn is_zero(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }

    pub fn min(self, o: Mag) -> Mag {
        if o.0 < self.0 {
            o
        } else {
            self
        }
    }

    pub fn max(self, o: Mag) -> Mag {
        if o.0 > self.0 {
            o
        } else {
            self
        }
    }

    pub fn sq(self) -> Mag {
        self * self
    }

    pub fn sqrt(self) -> Mag {
        Mag(self.0 / 2.0)
    }
}

impl Add for Mag {
    type Output = Mag;
    fn add(self, o: Mag) -> Mag {
        let (hi, lo) = if self.0 >= o.0 { (self.0, o.0) } else { (o.0, self.0) };
        if lo == f64::NEG_INFINITY || hi == f64::INFINITY {
            return Mag(hi);
        }
        Mag(hi + (lo - hi).exp().ln_1p())
    }
}

impl Mul for Mag {
    type Output = Mag;
    fn mul(self, o: Mag) -> Mag {
        if self.is_zero() || o.is_zero() {
            return Mag::ZERO;
        }
        Mag(self.0 + o.0)
    }
}

impl fmt::Debug for Mag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exp({})", self.0)
    }
}

impl fmt::Display for Mag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_inf() {
            f.write_str("inf")
        } else if self.is_zero() {
            f.write_str("-inf")
        } else {
            write!(f, "{:.12e}", self.0)
        }
    }
}

fn mg(x: f64) -> Mag {
    Mag::from_f64(x)
}

/// Output bound m, Lipschitz constant ℓ and smoothness L.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothTriple {
    pub m: Mag,
    pub l: Mag,
    pub big_l: Mag,
}

/// Constants of a bi-affine map b(x, u) = β(x, u) + β^u u + β^x x + β⁰.
///
/// `b0` is ‖β⁰‖ = ‖b(0, 0)‖.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiAffineConstants {
    pub lb: f64,
    pub lu: f64,
    pub lx: f64,
    pub b0: f64,
}

/// Constants of one nonlinear component, with its values at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActConstants {
    pub m: f64,
    pub l: f64,
    pub big_l: f64,
    /// ‖∇a(0)‖.
    pub grad0: f64,
    /// ‖a(0)‖.
    pub val0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConstants {
    pub affine: BiAffineConstants,
    pub activations: Vec<ActConstants>,
}

/// Cartesian product of parameter balls ‖u_t‖ ≤ R_t and the input norm m₀.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedDomain {
    pub radii: Vec<f64>,
    pub input_norm: f64,
}

impl BoundedDomain {
    pub fn new(radii: Vec<f64>, input_norm: f64) -> Result<Self> {
        if radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Invalid("domain radii must be positive".into()));
        }
        if !(input_norm >= 0.0) {
            return Err(Error::Invalid("input norm must be nonnegative".into()));
        }
        Ok(Self { radii, input_norm })
    }

    pub fn uniform(layers: usize, radius: f64, input_norm: f64) -> Result<Self> {
        Self::new(vec![radius; layers], input_norm)
    }

    /// Diameter 2·sqrt(Σ R_t²).
    pub fn diameter(&self) -> f64 {
        2.0 * self.radii.iter().map(|r| r * r).sum::<f64>().sqrt()
    }

    /// Blockwise radial projection.
    pub fn project(&self, u: &ParamVector) -> ParamVector {
        ParamVector {
            blocks: u
                .blocks
                .iter()
                .zip(&self.radii)
                .map(|(b, &r)| {
                    let n = b.norm();
                    if n > r {
                        b * (r / n)
                    } else {
                        b.clone()
                    }
                })
                .collect(),
        }
    }
}

/// Catalog constants of a bi-affine part on a batch of `m`.
pub fn affine_constants(affine: &Affine, m: usize) -> BiAffineConstants {
    let sm = (m as f64).sqrt();
    match affine {
        Affine::Identity { .. } => BiAffineConstants { lb: 0.0, lu: 0.0, lx: 1.0, b0: 0.0 },
        Affine::FullyConnected { .. } => BiAffineConstants { lb: 1.0, lu: sm, lx: 0.0, b0: 0.0 },
        Affine::Conv(g) => BiAffineConstants {
            lb: (g.max_cover() as f64).sqrt(),
            lu: (m as f64 * g.positions() as f64).sqrt(),
            lx: 0.0,
            b0: 0.0,
        },
        Affine::Form(f) => {
            let tn = tensor_norm_222(&f.beta, 100, 1e-12);
            let lb = if tn.exact { tn.value } else { f.beta.frobenius_norm() };
            BiAffineConstants { lb, lu: sm * operator_norm(&f.beta_u), lx: operator_norm(&f.beta_x), b0: sm * f.beta0.norm() }
        }
    }
}

/// Catalog constants of a component acting on `dim_in` coordinates per sample.
pub fn activation_constants(a: &Activation, dim_in: usize, m: usize) -> Result<ActConstants> {
    let n = (m * dim_in) as f64;
    let mf = m as f64;
    let inf = f64::INFINITY;
    Ok(match a {
        Activation::Identity => ActConstants { m: inf, l: 1.0, big_l: 0.0, grad0: 1.0, val0: 0.0 },
        Activation::Relu => ActConstants { m: inf, l: 1.0, big_l: inf, grad0: 0.0, val0: 0.0 },
        Activation::Softplus => {
            ActConstants { m: inf, l: 1.0, big_l: 0.25, grad0: 0.5, val0: std::f64::consts::LN_2 * n.sqrt() }
        }
        Activation::Sigmoid => ActConstants { m: n.sqrt(), l: 0.25, big_l: 0.1, grad0: 0.25, val0: n.sqrt() / 2.0 },
        Activation::Softmax => {
            let q = dim_in as f64;
            ActConstants {
                m: mf.sqrt(),
                l: 2.0,
                big_l: 4.0,
                grad0: if dim_in == 1 { 0.0 } else { 1.0 / q },
                val0: (mf / q).sqrt(),
            }
        }
        Activation::AvgPool(_) => ActConstants { m: inf, l: 1.0, big_l: 0.0, grad0: 1.0, val0: 0.0 },
        Activation::MaxPool(g) => {
            let l = (g.max_cover() as f64).sqrt();
            ActConstants { m: inf, l, big_l: inf, grad0: l, val0: 0.0 }
        }
        Activation::BatchNorm { eps } => ActConstants {
            m: dim_in as f64 * mf,
            l: 2.0 / eps.sqrt(),
            big_l: 2.0 / (mf.sqrt() * eps),
            grad0: if m == 1 { 0.0 } else { 1.0 / eps.sqrt() },
            val0: 0.0,
        },
        Activation::Implicit(map) => {
            let t = implicit_smoothness(map.problem.as_ref());
            let (v0, g0) = map.values_at_zero()?;
            ActConstants { m: inf, l: t.l.to_f64(), big_l: t.big_l.to_f64(), grad0: g0, val0: mf.sqrt() * v0 }
        }
    })
}

/// Catalog constants of a layer, including the residual adjustments.
pub fn catalog_constants(layer: &Layer, m: usize) -> Result<LayerConstants> {
    let mut affine = affine_constants(&layer.affine, m);
    let dims = layer.head_dims()?;
    let mut activations = layer
        .activations
        .iter()
        .zip(&dims)
        .map(|(a, &d)| activation_constants(a, d, m))
        .collect::<Result<Vec<_>>>()?;
    if layer.residual {
        affine.lx += 1.0;
        for c in &mut activations {
            c.m = f64::INFINITY;
            c.l = c.l.max(1.0);
            c.grad0 = c.grad0.max(1.0);
        }
    }
    Ok(LayerConstants { affine, activations })
}

/// (ℓ_f(R), m_f(R)) on the ball of radius R.
pub fn refine_on_ball(t: SmoothTriple, grad0: Mag, f0: Mag, r: Mag) -> (Mag, Mag) {
    let l = t.l.min(grad0 + r * t.big_l);
    (l, t.m.min(f0 + r * l))
}

/// Per-layer outputs of the propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub layers: Vec<SmoothTriple>,
}

impl Propagation {
    pub fn output(&self) -> SmoothTriple {
        *self.layers.last().expect("non-empty chain")
    }
}

/// Runs the automatic smoothness recursion over per-layer constants.
pub fn propagate(constants: &[LayerConstants], dom: &BoundedDomain) -> Result<Propagation> {
    if constants.len() != dom.radii.len() {
        return dim_err(format!("{} layers but {} radii", constants.len(), dom.radii.len()));
    }
    let mut m_prev = mg(dom.input_norm);
    let mut l_prev = Mag::ZERO;
    let mut big_prev = Mag::ZERO;
    let mut out = Vec::with_capacity(constants.len());
    for (c, &radius) in constants.iter().zip(&dom.radii) {
        let r = mg(radius);
        let (lb, lu, lx) = (mg(c.affine.lb), mg(c.affine.lu), mg(c.affine.lx));
        let lx0 = lb * r + lx;
        let lu0 = lb * m_prev + lu;
        let mut l0 = Mag::ONE;
        let mut mj = lx0 * m_prev + lu0 * r + mg(c.affine.b0);
        let mut big_j = Mag::ZERO;
        for a in &c.activations {
            let (ma, la, big_a) = (mg(a.m), mg(a.l), mg(a.big_l));
            let lt = la.min(mg(a.grad0) + big_a * mj);
            mj = ma.min(mg(a.val0) + lt * mj);
            big_j = big_j * la + big_a * l0.sq();
            l0 = lt * l0;
        }
        let l_t = lx0 * l0 * l_prev + lu0 * l0;
        let big_t = big_prev * lx0 * l0
            + lx0.sq() * big_j * l_prev.sq()
            + mg(2.0) * (lu0 * lx0 * big_j + lb * l0) * l_prev
            + lu0.sq() * big_j;
        m_prev = mj;
        l_prev = l_t;
        big_prev = big_t;
        out.push(SmoothTriple { m: mj, l: l_t, big_l: big_t });
    }
    Ok(Propagation { layers: out })
}

/// Catalog constants of every layer of a chain.
pub fn chain_constants(spec: &ChainSpec) -> Result<Vec<LayerConstants>> {
    spec.layers.iter().map(|l| catalog_constants(l, spec.batch)).collect()
}

/// Bounds (m_τ, ℓ_τ, L_τ) of u ↦ f_{x₀,τ}(u) on the domain.
pub fn propagate_chain(spec: &ChainSpec, dom: &BoundedDomain) -> Result<Propagation> {
    propagate(&chain_constants(spec)?, dom)
}

/// Generic composition recursion ℓ_t = ℓ_φ + ℓ_{t-1}ℓ_φ, L_t = L_{t-1}ℓ_φ + L_φ(1 + ℓ_{t-1})².
pub fn generic_recursion(l_phi: &[Mag], big_phi: &[Mag]) -> Result<(Mag, Mag)> {
    if l_phi.len() != big_phi.len() {
        return dim_err("constant lists differ in length");
    }
    let (mut l, mut big) = (Mag::ZERO, Mag::ZERO);
    for (&lp, &bp) in l_phi.iter().zip(big_phi) {
        big = big * lp + bp * (Mag::ONE + l).sq();
        l = lp + l * lp;
    }
    Ok((l, big))
}

/// Constants for the domain ‖u_t − u*_t‖ ≤ R'_t.
pub fn recenter_domain(
    constants: &[LayerConstants],
    center: &ParamVector,
    radii: Vec<f64>,
    input_norm: f64,
) -> Result<(Vec<LayerConstants>, BoundedDomain)> {
    if center.blocks.len() != constants.len() {
        return dim_err("center has a different number of blocks than the chain");
    }
    let shifted = constants
        .iter()
        .zip(center.block_norms())
        .map(|(c, n)| {
            let mut c = c.clone();
            c.affine.lx += c.affine.lb * n;
            c.affine.b0 += c.affine.lu * n;
            c
        })
        .collect();
    Ok((shifted, BoundedDomain::new(radii, input_norm)?))
}

/// Bound on the smoothness of F = h∘ψ + r on the domain.
///
/// `grad_ref` is ‖∇h(ψ(u_ref))‖ at any reference point of the domain.
pub fn objective_smoothness(psi: SmoothTriple, h: (f64, f64), grad_ref: f64, l_r: f64, dom: &BoundedDomain) -> Mag {
    let (lh, big_h) = (mg(h.0), mg(h.1));
    let lt = lh.min(mg(grad_ref) + big_h * psi.l * mg(dom.diameter()));
    psi.big_l * lt + psi.l.sq() * big_h + mg(l_r)
}

/// Composition of maps with refined bounds: m₀ = R, ℓ₀ = 1, L₀ = 0.
fn compose(stages: &[(SmoothTriple, Mag, Mag)], radius: f64) -> SmoothTriple {
    let (mut m, mut l, mut big) = (mg(radius), Mag::ONE, Mag::ZERO);
    for &(t, grad0, f0) in stages {
        let (lr, mr) = refine_on_ball(t, grad0, f0, m);
        big = t.big_l * l.sq() + big * lr;
        l = l * lr;
        m = mr;
    }
    SmoothTriple { m, l, big_l: big }
}

const DENSE_NORM_CAP: usize = 1 << 20;

/// Per-sample matrix of x ↦ b(x, u) − b(0, u), including residual blocks.
fn affine_x_matrix(layer: &Layer, u: &[f64]) -> Option<Matrix> {
    let din = layer.input_dim();
    let (a_in, eta) = (layer.affine.input_dim(), layer.affine.output_dim());
    let dout = eta + if layer.residual { a_in } else { 0 };
    if din * dout > DENSE_NORM_CAP {
        return None;
    }
    let mut mat = Matrix::zeros(dout, din);
    let x0 = vec![0.0; a_in];
    let mut ops = 0;
    // Columns are differences of an affine map in x, hence exact.
    let base = layer.affine.apply(&x0, u, 1, &mut ops).ok()?;
    let mut ex = vec![0.0; a_in];
    for i in 0..a_in {
        ex[i] = 1.0;
        let col = layer.affine.apply(&ex, u, 1, &mut ops).ok()? - &base;
        mat.view_mut((0, i), (eta, 1)).copy_from(&col);
        ex[i] = 0.0;
    }
    if layer.residual {
        for k in 0..eta {
            mat[(k, a_in + k)] = 1.0;
        }
        for i in 0..a_in {
            mat[(eta + i, i)] = 1.0;
        }
    }
    Some(mat)
}

/// Bounds for x ↦ f_{τ,u}(x) on ‖x‖ ≤ radius with fixed parameters.
pub fn input_smoothness(spec: &ChainSpec, u: &ParamVector, radius: f64) -> Result<SmoothTriple> {
    u.check(spec)?;
    let m = spec.batch;
    let mut stages = Vec::new();
    for (layer, ut) in spec.layers.iter().zip(&u.blocks) {
        let c = catalog_constants(layer, m)?;
        let ub = ut.as_slice();
        let l_aff = match affine_x_matrix(layer, ub) {
            Some(mat) => operator_norm(&mat),
            None => c.affine.lb * ut.norm() + c.affine.lx,
        };
        let mut ops = 0;
        let b0u = layer.affine.apply(&vec![0.0; layer.affine.input_dim()], ub, 1, &mut ops)?;
        let f0 = (m as f64).sqrt() * b0u.norm();
        let aff = SmoothTriple { m: Mag::INF, l: mg(l_aff), big_l: Mag::ZERO };
        stages.push((aff, mg(l_aff), mg(f0)));
        for a in &c.activations {
            let t = SmoothTriple { m: mg(a.m), l: mg(a.l), big_l: mg(a.big_l) };
            stages.push((t, mg(a.grad0), mg(a.val0)));
        }
    }
    Ok(compose(&stages, radius))
}

/// Reference-point data for [`objective_smoothness`]: ‖∇h(ψ(u_ref))‖.
pub fn grad_norm_at(spec: &ChainSpec, x0: &Vector, u_ref: &ParamVector, h: &dyn crate::objectives::Objective) -> Result<f64> {
    let tape = crate::autodiff::forward(spec, x0, u_ref)?;
    Ok(h.eval(tape.output())?.1.norm())
}
