//! Dense matrices and order-3 tensors.
//!
//! A tensor 𝓐 ∈ R^{d×n×p} is stored as `p` slices of shape `d×n`. The
//! tensor-matrix product 𝓐[P, Q, R] has slices Σ_k R_{k,k'} Pᵀ A_k Q; any
//! argument given as a vector is flattened away in the result.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Order-3 tensor as a list of `p` matrices of shape `d×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    d: usize,
    n: usize,
    slices: Vec<Matrix>,
}

/// One argument of a tensor-matrix product.
#[derive(Debug, Clone, Copy)]
pub enum Slot<'a> {
    /// The identity (written `·`).
    Hole,
    Mat(&'a Matrix),
    Vec(&'a Vector),
}

/// Result of a contraction after flattening vector arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum Contracted {
    Tensor(Tensor3),
    Matrix(Matrix),
    Vector(Vector),
    Scalar(f64),
}

impl Contracted {
    pub fn into_tensor(self) -> Option<Tensor3> {
        match self {
            Contracted::Tensor(t) => Some(t),
            _ => None,
        }
    }
    pub fn into_matrix(self) -> Option<Matrix> {
        match self {
            Contracted::Matrix(m) => Some(m),
            _ => None,
        }
    }
    pub fn into_vector(self) -> Option<Vector> {
        match self {
            Contracted::Vector(v) => Some(v),
            _ => None,
        }
    }
    pub fn into_scalar(self) -> Option<f64> {
        match self {
            Contracted::Scalar(s) => Some(s),
            _ => None,
        }
    }
}

impl Tensor3 {
    pub fn new(slices: Vec<Matrix>) -> Result<Self> {
        let Some(first) = slices.first() else {
            return dim_err("a tensor needs at least one slice");
        };
        let (d, n) = first.shape();
        if slices.iter().any(|s| s.shape() != (d, n)) {
            return dim_err("tensor slices must share one shape");
        }
        Ok(Self { d, n, slices })
    }

    pub fn zeros(d: usize, n: usize, p: usize) -> Self {
        Self { d, n, slices: vec![Matrix::zeros(d, n); p] }
    }

    pub fn from_fn(d: usize, n: usize, p: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let slices = (0..p).map(|k| Matrix::from_fn(d, n, |i, j| f(i, j, k))).collect();
        Self { d, n, slices }
    }

    /// x ⊠ y ⊠ z.
    pub fn outer(x: &Vector, y: &Vector, z: &Vector) -> Self {
        let xy = x * y.transpose();
        Self { d: x.len(), n: y.len(), slices: z.iter().map(|&zk| &xy * zk).collect() }
    }

    /// The tensor 𝓜 with Vec(AB) = 𝓜[Vec A, Vec B, ·] for A ∈ R^{n×d}, B ∈ R^{d×p}
    /// (column-major Vec).
    pub fn matrix_product(n: usize, d: usize, p: usize) -> Self {
        let mut t = Self::zeros(n * d, d * p, n * p);
        for i in 0..n {
            for j in 0..p {
                for l in 0..d {
                    t.slices[i + n * j][(i + n * l, l + d * j)] = 1.0;
                }
            }
        }
        t
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.n, self.slices.len())
    }

    pub fn slices(&self) -> &[Matrix] {
        &self.slices
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.slices[k][(i, j)]
    }

    /// 𝓐ᵗ: transposes every slice.
    pub fn transpose(&self) -> Self {
        Self { d: self.n, n: self.d, slices: self.slices.iter().map(|s| s.transpose()).collect() }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.slices.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt()
    }

    /// 𝓐[x, y, ·] = (xᵀ A_k y)_k.
    pub fn apply_xy(&self, x: &Vector, y: &Vector) -> Result<Vector> {
        if x.len() != self.d || y.len() != self.n {
            return dim_err("apply_xy: vectors do not match tensor dims");
        }
        let ay: Vec<f64> = self.slices.iter().map(|a| x.dot(&(a * y))).collect();
        Ok(Vector::from_vec(ay))
    }

    /// 𝓐[·, ·, z] = Σ z_k A_k.
    pub fn apply_z(&self, z: &Vector) -> Result<Matrix> {
        if z.len() != self.slices.len() {
            return dim_err("apply_z: vector does not match tensor depth");
        }
        let mut out = Matrix::zeros(self.d, self.n);
        for (a, &zk) in self.slices.iter().zip(z.iter()) {
            out += a * zk;
        }
        Ok(out)
    }

    /// General tensor-matrix product with flattening of vector slots.
    pub fn contract(&self, p: Slot, q: Slot, r: Slot) -> Result<Contracted> {
        let (d, n, depth) = self.dims();
        let pm = slot_matrix(p, d, "P")?;
        let qm = slot_matrix(q, n, "Q")?;
        let rm = slot_matrix(r, depth, "R")?;
        let d2 = pm.as_ref().map_or(d, |m| m.ncols());
        let n2 = qm.as_ref().map_or(n, |m| m.ncols());
        let p2 = rm.as_ref().map_or(depth, |m| m.ncols());

        let transformed: Vec<Matrix> = self
            .slices
            .iter()
            .map(|a| {
                let left = match &pm {
                    Some(pm) => pm.transpose() * a,
                    None => a.clone(),
                };
                match &qm {
                    Some(qm) => left * qm,
                    None => left,
                }
            })
            .collect();
        let out: Vec<Matrix> = match &rm {
            None => transformed,
            Some(rm) => (0..p2)
                .map(|kp| {
                    let mut s = Matrix::zeros(d2, n2);
                    for (k, tk) in transformed.iter().enumerate() {
                        let c = rm[(k, kp)];
                        if c != 0.0 {
                            s += tk * c;
                        }
                    }
                    s
                })
                .collect(),
        };

        let flat = (
            matches!(p, Slot::Vec(_)),
            matches!(q, Slot::Vec(_)),
            matches!(r, Slot::Vec(_)),
        );
        Ok(match flat {
            (false, false, false) => Contracted::Tensor(Tensor3 { d: d2, n: n2, slices: out }),
            (false, false, true) => Contracted::Matrix(out[0].clone()),
            (true, false, false) => Contracted::Matrix(Matrix::from_fn(n2, p2, |j, k| out[k][(0, j)])),
            (false, true, false) => Contracted::Matrix(Matrix::from_fn(d2, p2, |i, k| out[k][(i, 0)])),
            (true, true, false) => Contracted::Vector(Vector::from_fn(p2, |k, _| out[k][(0, 0)])),
            (true, false, true) => Contracted::Vector(out[0].row(0).transpose()),
            (false, true, true) => Contracted::Vector(out[0].column(0).into_owned()),
            (true, true, true) => Contracted::Scalar(out[0][(0, 0)]),
        })
    }
}

fn slot_matrix(s: Slot, rows: usize, name: &str) -> Result<Option<Matrix>> {
    match s {
        Slot::Hole => Ok(None),
        Slot::Mat(m) if m.nrows() == rows => Ok(Some(m.clone())),
        Slot::Vec(v) if v.len() == rows => Ok(Some(Matrix::from_column_slice(rows, 1, v.as_slice()))),
        _ => Err(Error::Dimension(format!("{name} must have {rows} rows"))),
    }
}

/// Largest singular value.
pub fn operator_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Estimate of ‖𝓐‖₂,₂,₂ with a flag telling whether the value is exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorNorm {
    pub value: f64,
    /// `true` when the tensor reduces to a matrix (some dimension is 1) and the
    /// value is an operator norm; otherwise the value is a lower bound.
    pub exact: bool,
}

/// Alternating maximization of 𝓐[x, y, z] over unit vectors with `restarts`
/// random initializations.
pub fn tensor_norm_222(t: &Tensor3, restarts: usize, tol: f64) -> TensorNorm {
    let (d, n, p) = t.dims();
    if d == 0 || n == 0 || p == 0 {
        return TensorNorm { value: 0.0, exact: true };
    }
    if p == 1 {
        return TensorNorm { value: operator_norm(&t.slices[0]), exact: true };
    }
    if d == 1 {
        let m = Matrix::from_fn(n, p, |j, k| t.slices[k][(0, j)]);
        return TensorNorm { value: operator_norm(&m), exact: true };
    }
    if n == 1 {
        let m = Matrix::from_fn(d, p, |i, k| t.slices[k][(i, 0)]);
        return TensorNorm { value: operator_norm(&m), exact: true };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x7e45_02a1);
    let mut best = 0.0_f64;
    for _ in 0..restarts.max(1) {
        let mut y = random_unit(&mut rng, n);
        let mut z = random_unit(&mut rng, p);
        let mut x = random_unit(&mut rng, d);
        let mut last = f64::NEG_INFINITY;
        for _ in 0..500 {
            let az = t.apply_z(&z).expect("dims checked");
            x = normalize(&az * &y).unwrap_or(x);
            y = normalize(az.transpose() * &x).unwrap_or(y);
            let zz = t.apply_xy(&x, &y).expect("dims checked");
            let val = zz.norm();
            z = normalize(zz).unwrap_or(z);
            if (val - last).abs() <= tol * val.max(1e-300) {
                last = val;
                break;
            }
            last = val;
        }
        best = best.max(last);
    }
    TensorNorm { value: best, exact: false }
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    loop {
        let v = Vector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        if let Some(u) = normalize(v) {
            return u;
        }
    }
}

fn normalize(v: Vector) -> Option<Vector> {
    let nrm = v.norm();
    (nrm > 0.0 && nrm.is_finite()).then(|| v / nrm)
}

/// Column-major Vec(M).
pub fn vec_of(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}
