//! Chains of computations x_t = φ_t(x_{t-1}, u_t) with φ_t = a_t ∘ b_t.
//!
//! A batch of `m` inputs is one chain on the concatenated state; every layer
//! works on sample-major batched vectors and shares its parameters across
//! samples.

pub mod activation;
pub mod affine;

pub use activation::{Activation, PoolGeometry};
pub use affine::{Affine, BiAffineForm, ConvGeometry};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Matrix, Vector};
use activation::ActCache;

/// One layer φ = a_k ∘ … ∘ a_1 ∘ b, optionally wrapped as a residual block.
///
/// A residual layer works on the augmented per-sample state (x, s) where
/// `s` has the affine output size, and returns (a(b(x, u) + s), x).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub affine: Affine,
    pub activations: Vec<Activation>,
    pub residual: bool,
}

/// Per-layer sparsity figures on a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerSparsity {
    pub s_a: u64,
    pub s_beta: u64,
    pub s_beta_u: u64,
    pub s_beta_x: u64,
}

impl LayerSparsity {
    /// Backward cost s_a + 2 s_β + s_{β^u} + s_{β^x}.
    pub fn backward_cost(&self) -> u64 {
        self.s_a + 2 * self.s_beta + self.s_beta_u + self.s_beta_x
    }
}

/// Adjoint-contracted second derivatives of a layer, over the batched input.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrder {
    /// ∇²_{xx}φ[·,·,λ], input × input.
    pub xx: Matrix,
    /// ∇²_{xu}φ[·,·,λ], input × params.
    pub xu: Matrix,
    /// ∇²_{uu}φ[·,·,λ], params × params.
    pub uu: Matrix,
}

/// What a forward pass through one layer keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    m: usize,
    xa: Vec<f64>,
    stage_inputs: Vec<Vector>,
    stages: Vec<ActCache>,
}

fn split(x: &[f64], m: usize, da: usize, db: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(m * da);
    let mut b = Vec::with_capacity(m * db);
    for s in 0..m {
        let row = &x[s * (da + db)..(s + 1) * (da + db)];
        a.extend_from_slice(&row[..da]);
        b.extend_from_slice(&row[da..]);
    }
    (a, b)
}

fn join(a: &[f64], b: &[f64], m: usize) -> Vector {
    let (da, db) = (a.len() / m, b.len() / m);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..m {
        out.extend_from_slice(&a[s * da..(s + 1) * da]);
        out.extend_from_slice(&b[s * db..(s + 1) * db]);
    }
    Vector::from_vec(out)
}

impl Layer {
    pub fn new(affine: Affine, activations: Vec<Activation>) -> Self {
        Self { affine, activations, residual: false }
    }

    /// Per-sample input dimension.
    pub fn input_dim(&self) -> usize {
        self.affine.input_dim() + if self.residual { self.affine.output_dim() } else { 0 }
    }

    /// Per-sample sizes entering each activation stage, then the head output.
    pub fn head_dims(&self) -> Result<Vec<usize>> {
        let mut dims = vec![self.affine.output_dim()];
        for a in &self.activations {
            let next = a.output_dim(*dims.last().expect("non-empty"))?;
            dims.push(next);
        }
        Ok(dims)
    }

    pub fn output_dim(&self) -> Result<usize> {
        let head = *self.head_dims()?.last().expect("non-empty");
        Ok(head + if self.residual { self.affine.input_dim() } else { 0 })
    }

    pub fn param_dim(&self) -> usize {
        self.affine.param_dim()
    }

    pub fn is_smooth(&self) -> bool {
        self.activations.iter().all(Activation::is_smooth)
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        if self.residual {
            s.push_str("residual ");
        }
        s.push_str(self.affine.name());
        for a in &self.activations {
            s.push_str(" | ");
            s.push_str(a.name());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.affine.validate()?;
        self.head_dims()?;
        Ok(())
    }

    pub fn sparsity(&self, m: usize) -> Result<LayerSparsity> {
        let (s_beta, s_beta_u, mut s_beta_x) = self.affine.sparsity(m);
        let dims = self.head_dims()?;
        let mut s_a: u64 = self.activations.iter().zip(&dims).map(|(a, &d)| a.sparsity(d, m)).sum();
        if self.residual {
            let (din, eta) = (self.affine.input_dim() as u64, self.affine.output_dim() as u64);
            s_a += m as u64 * din;
            s_beta_x += m as u64 * (eta + din);
        }
        Ok(LayerSparsity { s_a, s_beta, s_beta_u, s_beta_x })
    }

    fn check(&self, x: &[f64], u: &[f64], m: usize) -> Result<()> {
        if m == 0 || x.len() != m * self.input_dim() {
            return dim_err(format!("layer expects state length {}, got {}", m * self.input_dim(), x.len()));
        }
        if u.len() != self.param_dim() {
            return dim_err(format!("layer expects {} parameters, got {}", self.param_dim(), u.len()));
        }
        Ok(())
    }

    /// φ(x, u) together with the stored derivative information.
    pub fn forward(&self, x: &[f64], u: &[f64], m: usize, ops: &mut u64) -> Result<(Vector, LayerCache)> {
        self.check(x, u, m)?;
        let din = self.affine.input_dim();
        let (xa, skip) = if self.residual {
            split(x, m, din, self.affine.output_dim())
        } else {
            (x.to_vec(), Vec::new())
        };
        let mut z = self.affine.apply(&xa, u, m, ops)?;
        if self.residual {
            z += Vector::from_vec(skip);
            *ops += z.len() as u64;
        }
        let mut stage_inputs = Vec::with_capacity(self.activations.len());
        let mut stages = Vec::with_capacity(self.activations.len());
        for a in &self.activations {
            let (next, cache) = a.forward(z.as_slice(), m, ops)?;
            stage_inputs.push(z);
            stages.push(cache);
            z = next;
        }
        let out = if self.residual { join(z.as_slice(), &xa, m) } else { z };
        Ok((out, LayerCache { m, xa, stage_inputs, stages }))
    }

    fn head_len(&self, cache: &LayerCache, out_len: usize) -> usize {
        if self.residual {
            out_len - cache.m * self.affine.input_dim()
        } else {
            out_len
        }
    }

    /// (∇_x φ·λ, ∇_u φ·λ).
    pub fn backward(&self, cache: &LayerCache, u: &[f64], lambda: &[f64], ops: &mut u64) -> (Vector, Vector) {
        let m = cache.m;
        let din = self.affine.input_dim();
        let (lam_head, lam_tail) = if self.residual {
            let head = self.head_len(cache, lambda.len()) / m;
            split(lambda, m, head, din)
        } else {
            (lambda.to_vec(), Vec::new())
        };
        let mut mu = Vector::from_vec(lam_head);
        for st in cache.stages.iter().rev() {
            mu = st.vjp(mu.as_slice(), ops);
        }
        let (mut gx, gu) = self.affine.vjp(&cache.xa, u, mu.as_slice(), m, ops);
        if self.residual {
            // Tail pass-through of ā, then the two identity blocks of β̄^x.
            *ops += lam_tail.len() as u64;
            gx += Vector::from_vec(lam_tail);
            *ops += (gx.len() + mu.len()) as u64;
            return (join(gx.as_slice(), mu.as_slice(), m), gu);
        }
        (gx, gu)
    }

    /// Forward tangent ∇_xφᵀdx + ∇_uφᵀdu.
    pub fn jvp(&self, cache: &LayerCache, u: &[f64], dx: &[f64], du: &[f64]) -> Vector {
        let m = cache.m;
        let din = self.affine.input_dim();
        let (dxa, dskip) = if self.residual {
            split(dx, m, din, self.affine.output_dim())
        } else {
            (dx.to_vec(), Vec::new())
        };
        let mut dz = self.affine.jvp(&cache.xa, u, &dxa, du, m);
        if self.residual {
            dz += Vector::from_vec(dskip);
        }
        for st in &cache.stages {
            dz = st.jvp(dz.as_slice());
        }
        if self.residual {
            join(dz.as_slice(), &dxa, m)
        } else {
            dz
        }
    }

    /// Dense (∇_xφᵀ, ∇_uφᵀ): output × input and output × params.
    pub fn jacobians(&self, cache: &LayerCache, u: &[f64]) -> (Matrix, Matrix) {
        let n_in = cache.m * self.input_dim();
        let p = self.param_dim();
        let zero_x = vec![0.0; n_in];
        let zero_u = vec![0.0; p];
        let probe = self.jvp(cache, u, &zero_x, &zero_u);
        let n_out = probe.len();
        let mut a = Matrix::zeros(n_out, n_in);
        let mut e = zero_x.clone();
        for i in 0..n_in {
            e[i] = 1.0;
            a.set_column(i, &self.jvp(cache, u, &e, &zero_u));
            e[i] = 0.0;
        }
        let mut b = Matrix::zeros(n_out, p);
        let mut e = zero_u.clone();
        for k in 0..p {
            e[k] = 1.0;
            b.set_column(k, &self.jvp(cache, u, &zero_x, &e));
            e[k] = 0.0;
        }
        (a, b)
    }

    /// Second-order contraction by the adjoint λ on the layer output.
    pub fn second_contract(&self, cache: &LayerCache, u: &[f64], lambda: &[f64]) -> Result<SecondOrder> {
        if let Some(bad) = self.activations.iter().find(|a| !a.is_smooth()) {
            return Err(Error::SecondOrderUnavailable(bad.name().to_string()));
        }
        let m = cache.m;
        let (din, eta) = (self.affine.input_dim(), self.affine.output_dim());
        let n_in = m * self.input_dim();
        let p = self.param_dim();
        let n_omega = m * eta;
        let lam_head = if self.residual {
            let head = self.head_len(cache, lambda.len()) / m;
            split(lambda, m, head, din).0
        } else {
            lambda.to_vec()
        };

        // Adjoints at each stage output and the Jacobian of the stages so far.
        let k = cache.stages.len();
        let mut lams = vec![Vector::from_vec(lam_head); k + 1];
        let mut scratch = 0u64;
        for j in (0..k).rev() {
            lams[j] = cache.stages[j].vjp(lams[j + 1].as_slice(), &mut scratch);
        }
        let mu = lams[0].clone();
        let mut h = Matrix::zeros(n_omega, n_omega);
        let mut jpre = Matrix::identity(n_omega, n_omega);
        for (j, a) in self.activations.iter().enumerate() {
            let z = &cache.stage_inputs[j];
            let hj = a.hessian_contract(z.as_slice(), lams[j + 1].as_slice(), m)?;
            h += &jpre * hj * jpre.transpose();
            if j + 1 < k {
                let n_out = cache.stage_inputs[j + 1].len();
                jpre = &jpre * cache.stages[j].dense(z.len(), n_out);
            }
        }

        // Jacobians of ω = b(x, u) (+ skip), gradient convention.
        let mut jx = Matrix::zeros(n_in, n_omega);
        let mut ju = Matrix::zeros(p, n_omega);
        let mut e = vec![0.0; n_omega];
        for o in 0..n_omega {
            e[o] = 1.0;
            let (gx, gu) = self.affine.vjp(&cache.xa, u, &e, m, &mut scratch);
            let gx = if self.residual { join(gx.as_slice(), &e, m) } else { gx };
            jx.set_column(o, &gx);
            ju.set_column(o, &gu);
            e[o] = 0.0;
        }

        let mut bmu = Matrix::zeros(m * din, p);
        let mut eu = vec![0.0; p];
        for q in 0..p {
            eu[q] = 1.0;
            bmu.set_column(q, &self.affine.bilinear_x_vjp(&eu, mu.as_slice(), m));
            eu[q] = 0.0;
        }
        let bmu = if self.residual {
            // Skip rows carry no bilinear term.
            let mut full = Matrix::zeros(n_in, p);
            let w = din + eta;
            for s in 0..m {
                for i in 0..din {
                    full.set_row(s * w + i, &bmu.row(s * din + i));
                }
            }
            full
        } else {
            bmu
        };

        let jxh = &jx * &h;
        Ok(SecondOrder { xx: &jxh * jx.transpose(), xu: bmu + &jxh * ju.transpose(), uu: &ju * &h * ju.transpose() })
    }
}

/// φ(x, u) on a batch of `m` samples.
pub fn layer_value(layer: &Layer, x: &[f64], u: &[f64], m: usize) -> Result<Vector> {
    let mut ops = 0;
    Ok(layer.forward(x, u, m, &mut ops)?.0)
}

/// (∇_xφ(x, u)λ, ∇_uφ(x, u)λ).
pub fn layer_jvp_transposed(layer: &Layer, x: &[f64], u: &[f64], lambda: &[f64], m: usize) -> Result<(Vector, Vector)> {
    let mut ops = 0;
    let (y, cache) = layer.forward(x, u, m, &mut ops)?;
    if lambda.len() != y.len() {
        return dim_err(format!("adjoint has length {}, layer output {}", lambda.len(), y.len()));
    }
    Ok(layer.backward(&cache, u, lambda, &mut ops))
}

/// (∇²_{xx}φ, ∇²_{xu}φ, ∇²_{uu}φ) contracted with λ.
pub fn layer_second_contract(layer: &Layer, x: &[f64], u: &[f64], lambda: &[f64], m: usize) -> Result<SecondOrder> {
    let mut ops = 0;
    let (y, cache) = layer.forward(x, u, m, &mut ops)?;
    if lambda.len() != y.len() {
        return dim_err(format!("adjoint has length {}, layer output {}", lambda.len(), y.len()));
    }
    layer.second_contract(&cache, u, lambda)
}

/// Residual block x_t = a(b(x_{t-1}, u_t) + x_{t-2}) on the state (x_{t-1}, x_{t-2}).
pub fn residual_wrap(affine: Affine, activations: Vec<Activation>) -> Result<Layer> {
    let layer = Layer { affine, activations, residual: true };
    layer.validate()?;
    Ok(layer)
}

/// An ordered chain of layers on a batch of `batch` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub input_dim: usize,
    pub batch: usize,
    pub layers: Vec<Layer>,
}

impl ChainSpec {
    pub fn new(input_dim: usize, batch: usize, layers: Vec<Layer>) -> Result<Self> {
        let spec = Self { input_dim, batch, layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("a chain needs at least one layer".into()));
        }
        if self.batch == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        let mut d = self.input_dim;
        for (t, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| Error::Dimension(format!("layer {}: {e}", t + 1)))?;
            if layer.input_dim() != d {
                return dim_err(format!("layer {} expects input dim {}, previous output is {d}", t + 1, layer.input_dim()));
            }
            d = layer.output_dim()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Per-sample state sizes d_0, …, d_τ.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        for l in &self.layers {
            dims.push(l.output_dim().expect("validated chain"));
        }
        dims
    }

    pub fn output_dim(&self) -> usize {
        *self.dims().last().expect("non-empty")
    }

    pub fn param_dims(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::param_dim).collect()
    }

    pub fn is_smooth(&self) -> bool {
        self.layers.iter().all(Layer::is_smooth)
    }

    /// Same layers on a different batch size.
    pub fn with_batch(&self, batch: usize) -> Result<Self> {
        Self::new(self.input_dim, batch, self.layers.clone())
    }
}

/// Parameter blocks u_1, …, u_τ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub blocks: Vec<Vector>,
}

impl ParamVector {
    pub fn zeros(spec: &ChainSpec) -> Self {
        Self { blocks: spec.param_dims().into_iter().map(Vector::zeros).collect() }
    }

    pub fn from_flat(flat: &[f64], dims: &[usize]) -> Result<Self> {
        let total: usize = dims.iter().sum();
        if flat.len() != total {
            return dim_err(format!("expected {total} parameters, got {}", flat.len()));
        }
        let mut blocks = Vec::with_capacity(dims.len());
        let mut at = 0;
        for &d in dims {
            blocks.push(Vector::from_column_slice(&flat[at..at + d]));
            at += d;
        }
        Ok(Self { blocks })
    }

    pub fn to_flat(&self) -> Vector {
        let data: Vec<f64> = self.blocks.iter().flat_map(|b| b.iter().copied()).collect();
        Vector::from_vec(data)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn block_norms(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.norm()).collect()
    }

    pub fn check(&self, spec: &ChainSpec) -> Result<()> {
        if self.dims() != spec.param_dims() {
            return dim_err(format!("parameter blocks {:?} do not match chain {:?}", self.dims(), spec.param_dims()));
        }
        Ok(())
    }

    /// self + a·other, blockwise.
    pub fn axpy(&self, a: f64, other: &ParamVector) -> ParamVector {
        ParamVector { blocks: self.blocks.iter().zip(&other.blocks).map(|(x, y)| x + y * a).collect() }
    }

    pub fn scale(&self, a: f64) -> ParamVector {
        ParamVector { blocks: self.blocks.iter().map(|x| x * a).collect() }
    }
}
