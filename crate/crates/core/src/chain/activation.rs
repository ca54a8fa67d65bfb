//! Nonlinear components a_{t,j}: element-wise activations, softmax, pooling,
//! batch-norm and implicit maps.
//!
//! States are batched sample-major: sample `s` occupies `s*dim .. (s+1)*dim`.

use std::fmt;

use crate::error::{dim_err, Error, Result};
use crate::implicit::ImplicitMap;
use crate::tensor::{Matrix, Vector};

/// Window geometry for pooling over a C×H×W per-sample layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn out_h(&self) -> usize {
        (self.height - self.kernel_h) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.width - self.kernel_w) / self.stride + 1
    }
    pub fn input_dim(&self) -> usize {
        self.channels * self.height * self.width
    }
    pub fn output_dim(&self) -> usize {
        self.channels * self.out_h() * self.out_w()
    }
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Invalid("pool kernel and stride must be positive".into()));
        }
        if self.kernel_h > self.height || self.kernel_w > self.width {
            return dim_err(format!(
                "pool window {}x{} larger than input {}x{}",
                self.kernel_h, self.kernel_w, self.height, self.width
            ));
        }
        Ok(())
    }

    /// Input indices of each window, in output order (channel-major).
    pub fn windows(&self) -> Vec<Vec<usize>> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut out = Vec::with_capacity(self.output_dim());
        for c in 0..self.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut w = Vec::with_capacity(self.kernel_h * self.kernel_w);
                    for dy in 0..self.kernel_h {
                        for dx in 0..self.kernel_w {
                            let (y, x) = (oy * self.stride + dy, ox * self.stride + dx);
                            w.push(c * self.height * self.width + y * self.width + x);
                        }
                    }
                    out.push(w);
                }
            }
        }
        out
    }

    /// Largest number of windows covering one input coordinate.
    pub fn max_cover(&self) -> usize {
        axis_cover(self.height, self.kernel_h, self.stride, 0) * axis_cover(self.width, self.kernel_w, self.stride, 0)
    }
}

/// Largest number of windows (kernel `k`, stride `s`, zero padding `pad`) that
/// contain a single coordinate of an axis of length `n`.
pub(crate) fn axis_cover(n: usize, k: usize, s: usize, pad: usize) -> usize {
    let span = n + 2 * pad;
    if span < k {
        return 0;
    }
    let outs = (span - k) / s + 1;
    let mut count = vec![0usize; n];
    for o in 0..outs {
        for d in 0..k {
            let p = o * s + d;
            if p >= pad && p - pad < n {
                count[p - pad] += 1;
            }
        }
    }
    count.into_iter().max().unwrap_or(0)
}

/// One nonlinear component of a layer.
#[derive(Clone, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Sigmoid,
    /// Per-sample softmax over the whole per-sample vector.
    Softmax,
    AvgPool(PoolGeometry),
    MaxPool(PoolGeometry),
    /// Batch normalization across the batch, per feature; `eps > 0`.
    BatchNorm { eps: f64 },
    /// Per-sample argmin of a strongly convex inner problem.
    Implicit(ImplicitMap),
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::AvgPool(g) => write!(f, "AvgPool({g:?})"),
            Activation::MaxPool(g) => write!(f, "MaxPool({g:?})"),
            Activation::BatchNorm { eps } => write!(f, "BatchNorm {{ eps: {eps} }}"),
            Activation::Implicit(_) => write!(f, "Implicit"),
            other => f.write_str(other.name()),
        }
    }
}

/// Stored derivative of one component, kept in structured form.
#[derive(Debug, Clone)]
pub(crate) enum ActCache {
    /// Element-wise derivative.
    Diag(Vec<f64>),
    /// Dense blocks of ∇a (gradient convention, in×out per block).
    Blocks { blocks: Vec<Matrix>, coords: BlockCoords },
    Avg { windows: Vec<Vec<usize>>, dim_in: usize, dim_out: usize },
    /// For each batched output, the batched input index it selects.
    Max { argmax: Vec<usize>, n_in: usize },
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum BlockCoords {
    PerSample { dim_in: usize, dim_out: usize },
    PerFeature { features: usize },
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
            Activation::AvgPool(_) => "avgpool",
            Activation::MaxPool(_) => "maxpool",
            Activation::BatchNorm { .. } => "batchnorm",
            Activation::Implicit(_) => "implicit",
        }
    }

    /// Twice continuously differentiable everywhere.
    pub fn is_smooth(&self) -> bool {
        !matches!(self, Activation::Relu | Activation::MaxPool(_) | Activation::Implicit(_))
    }

    pub fn output_dim(&self, dim_in: usize) -> Result<usize> {
        match self {
            Activation::AvgPool(g) | Activation::MaxPool(g) => {
                g.validate()?;
                if g.input_dim() != dim_in {
                    return dim_err(format!("{} expects input dim {}, got {dim_in}", self.name(), g.input_dim()));
                }
                Ok(g.output_dim())
            }
            Activation::BatchNorm { eps } => {
                if !(*eps > 0.0) {
                    return Err(Error::Invalid("batch-norm eps must be positive".into()));
                }
                Ok(dim_in)
            }
            Activation::Implicit(map) => {
                if map.alpha_dim() != dim_in {
                    return dim_err(format!("implicit map expects input dim {}, got {dim_in}", map.alpha_dim()));
                }
                Ok(map.beta_dim())
            }
            _ => Ok(dim_in),
        }
    }

    /// Sparsity s_a of the component's Jacobian on a batch of `m` samples.
    pub fn sparsity(&self, dim_in: usize, m: usize) -> u64 {
        let (d, m) = (dim_in as u64, m as u64);
        match self {
            Activation::Identity | Activation::Relu | Activation::Softplus | Activation::Sigmoid => m * d,
            Activation::Softmax => m * d * d,
            Activation::BatchNorm { .. } => d * m * m,
            Activation::AvgPool(g) => m * (g.output_dim() * g.kernel_h * g.kernel_w) as u64,
            Activation::MaxPool(g) => m * g.output_dim() as u64,
            Activation::Implicit(map) => m * d * map.beta_dim() as u64,
        }
    }

    /// Evaluates the component on a batched state and stores its derivative.
    pub(crate) fn forward(&self, z: &[f64], m: usize, ops: &mut u64) -> Result<(Vector, ActCache)> {
        let n = z.len();
        let dim = n / m.max(1);
        match self {
            Activation::Identity => {
                *ops += n as u64;
                Ok((Vector::from_column_slice(z), ActCache::Diag(vec![1.0; n])))
            }
            Activation::Relu => {
                *ops += n as u64;
                let y = Vector::from_iterator(n, z.iter().map(|&v| v.max(0.0)));
                let d = z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                Ok((y, ActCache::Diag(d)))
            }
            Activation::Softplus => {
                *ops += n as u64;
                let y = Vector::from_iterator(n, z.iter().map(|&v| softplus(v)));
                Ok((y, ActCache::Diag(z.iter().map(|&v| sigmoid(v)).collect())))
            }
            Activation::Sigmoid => {
                *ops += n as u64;
                let s: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
                let d = s.iter().map(|&v| v * (1.0 - v)).collect();
                Ok((Vector::from_vec(s), ActCache::Diag(d)))
            }
            Activation::Softmax => {
                let mut y = Vector::zeros(n);
                let mut blocks = Vec::with_capacity(m);
                for s in 0..m {
                    let ys = softmax(&z[s * dim..(s + 1) * dim]);
                    y.rows_mut(s * dim, dim).copy_from(&ys);
                    blocks.push(Matrix::from_diagonal(&ys) - &ys * ys.transpose());
                }
                *ops += (m * dim * dim) as u64;
                Ok((y, ActCache::Blocks { blocks, coords: BlockCoords::PerSample { dim_in: dim, dim_out: dim } }))
            }
            Activation::AvgPool(g) => {
                let windows = g.windows();
                let dim_out = windows.len();
                let mut y = Vector::zeros(m * dim_out);
                for s in 0..m {
                    let zs = &z[s * dim..(s + 1) * dim];
                    for (o, w) in windows.iter().enumerate() {
                        y[s * dim_out + o] = w.iter().map(|&i| zs[i]).sum::<f64>() / w.len() as f64;
                    }
                }
                *ops += self.sparsity(dim, m);
                Ok((y, ActCache::Avg { windows, dim_in: dim, dim_out }))
            }
            Activation::MaxPool(g) => {
                let windows = g.windows();
                let dim_out = windows.len();
                let mut y = Vector::zeros(m * dim_out);
                let mut argmax = Vec::with_capacity(m * dim_out);
                for s in 0..m {
                    let base = s * dim;
                    for (o, w) in windows.iter().enumerate() {
                        // Ties go to the lowest patch index.
                        let mut best = w[0];
                        for &i in &w[1..] {
                            if z[base + i] > z[base + best] {
                                best = i;
                            }
                        }
                        y[s * dim_out + o] = z[base + best];
                        argmax.push(base + best);
                    }
                }
                *ops += (m * dim_out) as u64;
                Ok((y, ActCache::Max { argmax, n_in: n }))
            }
            Activation::BatchNorm { eps } => {
                let mut y = Vector::zeros(n);
                let mut blocks = Vec::with_capacity(dim);
                for i in 0..dim {
                    let col: Vec<f64> = (0..m).map(|s| z[s * dim + i]).collect();
                    let (yi, ji) = batchnorm_feature(&col, *eps);
                    for s in 0..m {
                        y[s * dim + i] = yi[s];
                    }
                    blocks.push(ji);
                }
                *ops += (dim * m * m) as u64;
                Ok((y, ActCache::Blocks { blocks, coords: BlockCoords::PerFeature { features: dim } }))
            }
            Activation::Implicit(map) => {
                let dim_out = map.beta_dim();
                let mut y = Vector::zeros(m * dim_out);
                let mut blocks = Vec::with_capacity(m);
                for s in 0..m {
                    let alpha = Vector::from_column_slice(&z[s * dim..(s + 1) * dim]);
                    let (beta, grad) = map.value_and_gradient(&alpha)?;
                    y.rows_mut(s * dim_out, dim_out).copy_from(&beta);
                    blocks.push(grad);
                }
                *ops += self.sparsity(dim, m);
                Ok((y, ActCache::Blocks { blocks, coords: BlockCoords::PerSample { dim_in: dim, dim_out } }))
            }
        }
    }

    /// Second-order contraction ∇²a(z)[·, ·, λ] as a dense matrix over the batched input.
    pub(crate) fn hessian_contract(&self, z: &[f64], lambda: &[f64], m: usize) -> Result<Matrix> {
        let n = z.len();
        let dim = n / m.max(1);
        let mut h = Matrix::zeros(n, n);
        match self {
            Activation::Identity | Activation::AvgPool(_) => {}
            Activation::Relu | Activation::MaxPool(_) | Activation::Implicit(_) => {
                return Err(Error::SecondOrderUnavailable(self.name().to_string()));
            }
            Activation::Softplus => {
                for i in 0..n {
                    let s = sigmoid(z[i]);
                    h[(i, i)] = s * (1.0 - s) * lambda[i];
                }
            }
            Activation::Sigmoid => {
                for i in 0..n {
                    let s = sigmoid(z[i]);
                    h[(i, i)] = s * (1.0 - s) * (1.0 - 2.0 * s) * lambda[i];
                }
            }
            Activation::Softmax => {
                for s in 0..m {
                    let r = s * dim..(s + 1) * dim;
                    let y = softmax(&z[r.clone()]);
                    let lam = &lambda[r];
                    let ybar: f64 = y.iter().zip(lam).map(|(a, b)| a * b).sum();
                    for i in 0..dim {
                        for k in 0..dim {
                            let mut v = -y[i] * y[k] * (lam[i] - ybar) - y[i] * y[k] * (lam[k] - ybar);
                            if i == k {
                                v += y[i] * (lam[i] - ybar);
                            }
                            h[(s * dim + i, s * dim + k)] = v;
                        }
                    }
                }
            }
            Activation::BatchNorm { eps } => {
                for i in 0..dim {
                    let col: Vec<f64> = (0..m).map(|s| z[s * dim + i]).collect();
                    let lam: Vec<f64> = (0..m).map(|s| lambda[s * dim + i]).collect();
                    let hi = batchnorm_hessian(&col, &lam, *eps);
                    for a in 0..m {
                        for b in 0..m {
                            h[(a * dim + i, b * dim + i)] = hi[(a, b)];
                        }
                    }
                }
            }
        }
        Ok(h)
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vector {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - mx).exp()).collect();
    let tot: f64 = e.iter().sum();
    Vector::from_iterator(z.len(), e.into_iter().map(|v| v / tot))
}

/// Normalizes one feature across the batch; returns outputs and the m×m Jacobian.
fn batchnorm_feature(x: &[f64], eps: f64) -> (Vec<f64>, Matrix) {
    let m = x.len();
    let mf = m as f64;
    let mu = x.iter().sum::<f64>() / mf;
    let c: Vec<f64> = x.iter().map(|v| v - mu).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / mf;
    let f = 1.0 / (var + eps).sqrt();
    let y = c.iter().map(|v| v * f).collect();
    let f3 = f * f * f;
    let j = Matrix::from_fn(m, m, |a, b| {
        let delta = if a == b { 1.0 } else { 0.0 };
        f * (delta - 1.0 / mf) - f3 * c[a] * c[b] / mf
    });
    (y, j)
}

fn batchnorm_hessian(x: &[f64], lam: &[f64], eps: f64) -> Matrix {
    let m = x.len();
    let mf = m as f64;
    let mu = x.iter().sum::<f64>() / mf;
    let c = Vector::from_iterator(m, x.iter().map(|v| v - mu));
    let lbar = lam.iter().sum::<f64>() / mf;
    let w = Vector::from_iterator(m, lam.iter().map(|v| v - lbar));
    let v = c.norm_squared() / mf + eps;
    let f = 1.0 / v.sqrt();
    let f3 = f * f * f;
    let f5 = f3 * f * f;
    let grad_f = &c * (-f3 / mf);
    let proj = Matrix::identity(m, m) - Matrix::from_element(m, m, 1.0 / mf);
    let hess_f = proj * (-f3 / mf) + &c * c.transpose() * (3.0 * f5 / (mf * mf));
    let wc = w.dot(&c);
    &w * grad_f.transpose() + &grad_f * w.transpose() + hess_f * wc
}

impl ActCache {
    /// ∇a(z)·λ on the batched state.
    pub(crate) fn vjp(&self, lambda: &[f64], ops: &mut u64) -> Vector {
        match self {
            ActCache::Diag(d) => {
                *ops += d.len() as u64;
                Vector::from_iterator(d.len(), d.iter().zip(lambda).map(|(a, b)| a * b))
            }
            ActCache::Blocks { blocks, coords } => match *coords {
                BlockCoords::PerSample { dim_in, dim_out } => {
                    let mut g = Vector::zeros(blocks.len() * dim_in);
                    for (s, b) in blocks.iter().enumerate() {
                        for i in 0..dim_in {
                            let mut acc = 0.0;
                            for o in 0..dim_out {
                                acc += b[(i, o)] * lambda[s * dim_out + o];
                            }
                            g[s * dim_in + i] = acc;
                        }
                        *ops += (dim_in * dim_out) as u64;
                    }
                    g
                }
                BlockCoords::PerFeature { features } => {
                    let m = blocks.first().map_or(0, |b| b.nrows());
                    let mut g = Vector::zeros(m * features);
                    for (i, b) in blocks.iter().enumerate() {
                        for a in 0..m {
                            let mut acc = 0.0;
                            for c in 0..m {
                                acc += b[(a, c)] * lambda[c * features + i];
                            }
                            g[a * features + i] = acc;
                        }
                        *ops += (m * m) as u64;
                    }
                    g
                }
            },
            ActCache::Avg { windows, dim_in, dim_out } => {
                let m = lambda.len() / dim_out;
                let mut g = Vector::zeros(m * dim_in);
                for s in 0..m {
                    for (o, w) in windows.iter().enumerate() {
                        let share = lambda[s * dim_out + o] / w.len() as f64;
                        for &i in w {
                            g[s * dim_in + i] += share;
                        }
                        *ops += w.len() as u64;
                    }
                }
                g
            }
            ActCache::Max { argmax, n_in } => {
                let mut g = Vector::zeros(*n_in);
                for (o, &i) in argmax.iter().enumerate() {
                    g[i] += lambda[o];
                }
                *ops += argmax.len() as u64;
                g
            }
        }
    }

    /// ∇a(z)ᵀ·dz (forward tangent).
    pub(crate) fn jvp(&self, dz: &[f64]) -> Vector {
        match self {
            ActCache::Diag(d) => Vector::from_iterator(d.len(), d.iter().zip(dz).map(|(a, b)| a * b)),
            ActCache::Blocks { blocks, coords } => match *coords {
                BlockCoords::PerSample { dim_in, dim_out } => {
                    let mut y = Vector::zeros(blocks.len() * dim_out);
                    for (s, b) in blocks.iter().enumerate() {
                        let ys = b.transpose() * dz_rows(dz, s * dim_in, dim_in);
                        y.rows_mut(s * dim_out, dim_out).copy_from(&ys);
                    }
                    y
                }
                BlockCoords::PerFeature { features } => {
                    let m = blocks.first().map_or(0, |b| b.nrows());
                    let mut y = Vector::zeros(m * features);
                    for (i, b) in blocks.iter().enumerate() {
                        for a in 0..m {
                            let mut acc = 0.0;
                            for c in 0..m {
                                acc += b[(c, a)] * dz[c * features + i];
                            }
                            y[a * features + i] = acc;
                        }
                    }
                    y
                }
            },
            ActCache::Avg { windows, dim_in, dim_out } => {
                let m = dz.len() / dim_in;
                let mut y = Vector::zeros(m * dim_out);
                for s in 0..m {
                    for (o, w) in windows.iter().enumerate() {
                        y[s * dim_out + o] = w.iter().map(|&i| dz[s * dim_in + i]).sum::<f64>() / w.len() as f64;
                    }
                }
                y
            }
            ActCache::Max { argmax, .. } => Vector::from_iterator(argmax.len(), argmax.iter().map(|&i| dz[i])),
        }
    }

    /// Dense ∇a(z) (batched input × batched output), built column by column.
    pub(crate) fn dense(&self, n_in: usize, n_out: usize) -> Matrix {
        let mut j = Matrix::zeros(n_in, n_out);
        let mut e = vec![0.0; n_out];
        let mut scratch = 0u64;
        for o in 0..n_out {
            e[o] = 1.0;
            j.set_column(o, &self.vjp(&e, &mut scratch));
            e[o] = 0.0;
        }
        j
    }
}

fn dz_rows(dz: &[f64], start: usize, len: usize) -> Vector {
    Vector::from_column_slice(&dz[start..start + len])
}
