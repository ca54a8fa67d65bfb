//! Terminal objectives h on the chain output and the regularizer r.
//!
//! Chain outputs are sample-major: sample `i` of `n` occupies
//! `i*q .. (i+1)*q`.

use crate::chain::activation::softmax;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Matrix, Vector};

/// A terminal objective h with value, gradient and smoothness constants.
pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;
    /// Number of samples n (the averaging count of a finite sum).
    fn samples(&self) -> usize;
    /// Expected length of the chain output.
    fn input_dim(&self) -> usize;
    fn eval(&self, y: &Vector) -> Result<(f64, Vector)>;
    fn hessian(&self, _y: &Vector) -> Result<Matrix> {
        Err(Error::SecondOrderUnavailable(format!("{} objective", self.name())))
    }
    /// (ℓ_h, L_h); ℓ_h may be +∞.
    fn constants(&self) -> (f64, f64);
    /// The same objective on a subset of samples, for finite sums.
    fn subset(&self, _idx: &[usize]) -> Option<Box<dyn Objective>> {
        None
    }
}

fn check_len(name: &str, y: &Vector, want: usize) -> Result<()> {
    if y.len() != want {
        return dim_err(format!("{name} objective expects {want} values, got {}", y.len()));
    }
    Ok(())
}

fn gather(v: &Vector, idx: &[usize], q: usize) -> Vector {
    Vector::from_iterator(idx.len() * q, idx.iter().flat_map(|&i| v.as_slice()[i * q..(i + 1) * q].iter().copied()))
}

/// h(ŷ) = (1/n) Σ ½‖ŷ_i − y_i‖².
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredLoss {
    pub targets: Vector,
    pub samples: usize,
    /// ℓ_h = ρ_C + ρ_𝒴 when output and label bounds are known, else +∞.
    pub lipschitz: f64,
}

impl SquaredLoss {
    pub fn new(targets: Vector, samples: usize) -> Result<Self> {
        if samples == 0 || targets.len() % samples != 0 {
            return Err(Error::Invalid("targets must split evenly into samples".into()));
        }
        Ok(Self { targets, samples, lipschitz: f64::INFINITY })
    }

    /// Declares ‖ŷ_i‖ ≤ ρ_C and ‖y_i‖ ≤ ρ_𝒴.
    pub fn with_bounds(mut self, rho_c: f64, rho_y: f64) -> Self {
        self.lipschitz = rho_c + rho_y;
        self
    }
}

impl Objective for SquaredLoss {
    fn name(&self) -> &'static str {
        "squared"
    }
    fn samples(&self) -> usize {
        self.samples
    }
    fn input_dim(&self) -> usize {
        self.targets.len()
    }
    fn eval(&self, y: &Vector) -> Result<(f64, Vector)> {
        check_len("squared", y, self.targets.len())?;
        let n = self.samples as f64;
        let r = y - &self.targets;
        Ok((0.5 * r.norm_squared() / n, r / n))
    }
    fn hessian(&self, y: &Vector) -> Result<Matrix> {
        check_len("squared", y, self.targets.len())?;
        Ok(Matrix::identity(y.len(), y.len()) / self.samples as f64)
    }
    fn constants(&self) -> (f64, f64) {
        (self.lipschitz, 1.0)
    }
    fn subset(&self, idx: &[usize]) -> Option<Box<dyn Objective>> {
        let q = self.targets.len() / self.samples;
        let targets = gather(&self.targets, idx, q);
        Some(Box::new(SquaredLoss { targets, samples: idx.len(), lipschitz: self.lipschitz }))
    }
}

/// h(ŷ) = (1/n) Σ (−y_iᵀŷ_i + log Σ_j exp ŷ_ij) with one-hot y_i.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticLoss {
    pub labels: Vector,
    pub samples: usize,
}

impl LogisticLoss {
    pub fn new(labels: Vector, samples: usize) -> Result<Self> {
        if samples == 0 || labels.len() % samples != 0 {
            return Err(Error::Invalid("labels must split evenly into samples".into()));
        }
        let q = labels.len() / samples;
        for i in 0..samples {
            let row = &labels.as_slice()[i * q..(i + 1) * q];
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Invalid(format!("label {i} is not one-hot")));
            }
        }
        Ok(Self { labels, samples })
    }

    /// One-hot labels from class indices.
    pub fn from_classes(classes: &[usize], q: usize) -> Result<Self> {
        let mut labels = Vector::zeros(classes.len() * q);
        for (i, &c) in classes.iter().enumerate() {
            if c >= q {
                return Err(Error::Invalid(format!("class {c} out of range for {q} classes")));
            }
            labels[i * q + c] = 1.0;
        }
        Self::new(labels, classes.len())
    }

    fn q(&self) -> usize {
        self.labels.len() / self.samples
    }
}

impl Objective for LogisticLoss {
    fn name(&self) -> &'static str {
        "logistic"
    }
    fn samples(&self) -> usize {
        self.samples
    }
    fn input_dim(&self) -> usize {
        self.labels.len()
    }
    fn eval(&self, y: &Vector) -> Result<(f64, Vector)> {
        check_len("logistic", y, self.labels.len())?;
        let (q, n) = (self.q(), self.samples as f64);
        let mut value = 0.0;
        let mut grad = Vector::zeros(y.len());
        for i in 0..self.samples {
            let yi = &y.as_slice()[i * q..(i + 1) * q];
            let li = &self.labels.as_slice()[i * q..(i + 1) * q];
            let mx = yi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + yi.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            value += lse - yi.iter().zip(li).map(|(a, b)| a * b).sum::<f64>();
            let s = softmax(yi);
            for j in 0..q {
                grad[i * q + j] = (s[j] - li[j]) / n;
            }
        }
        Ok((value / n, grad))
    }
    fn hessian(&self, y: &Vector) -> Result<Matrix> {
        check_len("logistic", y, self.labels.len())?;
        let (q, n) = (self.q(), self.samples as f64);
        let mut h = Matrix::zeros(y.len(), y.len());
        for i in 0..self.samples {
            let s = softmax(&y.as_slice()[i * q..(i + 1) * q]);
            let block = (Matrix::from_diagonal(&s) - &s * s.transpose()) / n;
            h.view_mut((i * q, i * q), (q, q)).copy_from(&block);
        }
        Ok(h)
    }
    fn constants(&self) -> (f64, f64) {
        (2.0, 2.0)
    }
    fn subset(&self, idx: &[usize]) -> Option<Box<dyn Objective>> {
        Some(Box::new(LogisticLoss { labels: gather(&self.labels, idx, self.q()), samples: idx.len() }))
    }
}

/// Convex clustering h(ŷ) = min_y ½‖y − ŷ‖² + Σ_{i<j} ‖y_i − y_j‖₂.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexClustering {
    pub samples: usize,
    pub dim: usize,
    /// Duality-gap tolerance of the inner solve, relative to max(1, |h|).
    pub tol: f64,
    pub max_iter: usize,
}

/// Inner solution of the clustering problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSolution {
    pub value: f64,
    pub y: Vector,
    pub gap: f64,
    pub iterations: usize,
}

impl ConvexClustering {
    pub fn new(samples: usize, dim: usize) -> Self {
        Self { samples, dim, tol: 1e-13, max_iter: 1_000_000 }
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.samples;
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    }

    fn dt(&self, z: &[f64], pairs: &[(usize, usize)]) -> Vector {
        let q = self.dim;
        let mut out = Vector::zeros(self.samples * q);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            for c in 0..q {
                out[i * q + c] += z[k * q + c];
                out[j * q + c] -= z[k * q + c];
            }
        }
        out
    }

    fn primal(&self, y: &Vector, yhat: &Vector, pairs: &[(usize, usize)]) -> f64 {
        let q = self.dim;
        let fuse: f64 = pairs
            .iter()
            .map(|&(i, j)| (0..q).map(|c| (y[i * q + c] - y[j * q + c]).powi(2)).sum::<f64>().sqrt())
            .sum();
        0.5 * (y - yhat).norm_squared() + fuse
    }

    /// Accelerated projected gradient on the dual over unit balls, stopped on the duality gap.
    pub fn solve(&self, yhat: &Vector) -> Result<ClusterSolution> {
        check_len("convex clustering", yhat, self.samples * self.dim)?;
        let pairs = self.pairs();
        if pairs.is_empty() {
            return Ok(ClusterSolution { value: 0.0, y: yhat.clone(), gap: 0.0, iterations: 0 });
        }
        let q = self.dim;
        let step = 1.0 / self.samples as f64;
        let mut z = vec![0.0; pairs.len() * q];
        let mut w = z.clone();
        let mut t = 1.0f64;
        let mut best: Option<ClusterSolution> = None;
        for it in 0..self.max_iter {
            if it % 10 == 0 {
                let y = yhat - self.dt(&z, &pairs);
                let value = self.primal(&y, yhat, &pairs);
                let dual = 0.5 * yhat.norm_squared() - 0.5 * y.norm_squared();
                let gap = (value - dual).max(0.0);
                let better = best.as_ref().map_or(true, |b| gap < b.gap);
                if better {
                    best = Some(ClusterSolution { value, y, gap, iterations: it });
                }
                if gap <= self.tol * value.abs().max(1.0) {
                    return Ok(best.expect("set above"));
                }
            }
            let yw = yhat - self.dt(&w, &pairs);
            let mut znew = w.clone();
            for (k, &(i, j)) in pairs.iter().enumerate() {
                let blk = &mut znew[k * q..(k + 1) * q];
                for c in 0..q {
                    blk[c] += step * (yw[i * q + c] - yw[j * q + c]);
                }
                let nrm = blk.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm > 1.0 {
                    blk.iter_mut().for_each(|v| *v /= nrm);
                }
            }
            let tnew = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            // Restart momentum when it points uphill.
            let uphill: f64 = znew.iter().zip(&z).zip(&w).map(|((zn, zo), wv)| (wv - zn) * (zn - zo)).sum();
            if uphill > 0.0 {
                t = 1.0;
                w = znew.clone();
            } else {
                let beta = (t - 1.0) / tnew;
                w = znew.iter().zip(&z).map(|(zn, zo)| zn + beta * (zn - zo)).collect();
                t = tnew;
            }
            z = znew;
        }
        Err(Error::IterationCap(self.max_iter))
    }
}

impl Objective for ConvexClustering {
    fn name(&self) -> &'static str {
        "cluster"
    }
    fn samples(&self) -> usize {
        self.samples
    }
    fn input_dim(&self) -> usize {
        self.samples * self.dim
    }
    fn eval(&self, y: &Vector) -> Result<(f64, Vector)> {
        let sol = self.solve(y)?;
        Ok((sol.value, y - sol.y))
    }
    fn constants(&self) -> (f64, f64) {
        let n = self.samples as f64;
        (n * (n - 1.0) / 2.0, 1.0)
    }
}

/// Decomposable regularizer r(u) = Σ_t r_t(u_t).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Regularizer {
    #[default]
    Zero,
    /// r(u) = ρ/2 ‖u‖².
    Ridge(f64),
}

impl Regularizer {
    pub fn rho(&self) -> f64 {
        match self {
            Regularizer::Zero => 0.0,
            Regularizer::Ridge(r) => *r,
        }
    }
    pub fn value(&self, u: &Vector) -> f64 {
        0.5 * self.rho() * u.norm_squared()
    }
    pub fn grad(&self, u: &Vector) -> Vector {
        u * self.rho()
    }
    pub fn hessian(&self, p: usize) -> Matrix {
        Matrix::identity(p, p) * self.rho()
    }
    /// Smoothness constant L_r.
    pub fn smoothness(&self) -> f64 {
        self.rho()
    }
}
