#![allow(dead_code)]

use chainopt::autodiff::forward;
use chainopt::chain::{Activation, Affine, ChainSpec, ConvGeometry, Layer, ParamVector, PoolGeometry};
use chainopt::objectives::Objective;
use chainopt::tensor::{Matrix, Vector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy)]
pub struct Gen {
    /// Only twice differentiable components.
    pub smooth: bool,
    pub batchnorm: bool,
    pub residual: bool,
    pub softmax: bool,
    pub max_tau: usize,
    pub max_dim: usize,
    pub batch: usize,
}

impl Default for Gen {
    fn default() -> Self {
        Self { smooth: true, batchnorm: true, residual: false, softmax: false, max_tau: 4, max_dim: 8, batch: 3 }
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Flat(usize),
    Image(usize, usize, usize),
}

impl Shape {
    fn dim(self) -> usize {
        match self {
            Shape::Flat(d) => d,
            Shape::Image(c, h, w) => c * h * w,
        }
    }
}

pub fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn elementwise(rng: &mut ChaCha8Rng, g: &Gen) -> Activation {
    match rng.random_range(0..if g.smooth { 2 } else { 3 }) {
        0 => Activation::Softplus,
        1 => Activation::Sigmoid,
        _ => Activation::Relu,
    }
}

/// Random chain mixing fully connected, convolution and identity maps with
/// element-wise, pooling and batch-norm components; every state has at most
/// `max_dim` coordinates per sample.
pub fn random_chain(rng: &mut ChaCha8Rng, g: &Gen) -> ChainSpec {
    let md = g.max_dim;
    let mut shape = if rng.random_bool(0.5) {
        let c = rng.random_range(1..=2);
        let h = rng.random_range(2..=3);
        let w = rng.random_range(2..=3);
        if c * h * w <= md {
            Shape::Image(c, h, w)
        } else {
            Shape::Image(1, h, w)
        }
    } else {
        Shape::Flat(rng.random_range(1..=md))
    };
    let input_dim = shape.dim();
    let tau = rng.random_range(1..=g.max_tau);
    let mut layers = Vec::with_capacity(tau);
    for t in 0..tau {
        let d = shape.dim();
        let mut residual = false;
        let affine = match (shape, rng.random_range(0..10)) {
            (Shape::Image(c, h, w), 0..=4) => {
                let k = rng.random_range(1..=2usize.min(h).min(w));
                let pad = rng.random_range(0..=1);
                let filters = rng.random_range(1..=2);
                let geo = ConvGeometry { channels: c, height: h, width: w, filters, kernel_h: k, kernel_w: k, stride: 1, pad };
                if filters * geo.out_h() * geo.out_w() <= md {
                    shape = Shape::Image(filters, geo.out_h(), geo.out_w());
                    Affine::Conv(geo)
                } else {
                    let o = rng.random_range(1..=md);
                    shape = Shape::Flat(o);
                    Affine::FullyConnected { inputs: d, outputs: o }
                }
            }
            (_, 9) => Affine::Identity { dim: d },
            (Shape::Flat(_), 5..=6) if g.residual && d >= 2 => {
                residual = true;
                let o = rng.random_range(1..d);
                shape = Shape::Flat(d);
                Affine::FullyConnected { inputs: d - o, outputs: o }
            }
            _ => {
                let o = rng.random_range(1..=md);
                shape = Shape::Flat(o);
                Affine::FullyConnected { inputs: d, outputs: o }
            }
        };
        let mut acts = Vec::new();
        if residual {
            acts.push(elementwise(rng, g));
        } else {
            if rng.random_bool(0.8) {
                acts.push(elementwise(rng, g));
            }
            if let Shape::Image(c, h, w) = shape {
                if h >= 2 && w >= 2 && rng.random_bool(0.4) {
                    let geo = PoolGeometry { channels: c, height: h, width: w, kernel_h: 2, kernel_w: 2, stride: 1 };
                    shape = Shape::Image(c, geo.out_h(), geo.out_w());
                    acts.push(if !g.smooth && rng.random_bool(0.5) { Activation::MaxPool(geo) } else { Activation::AvgPool(geo) });
                }
            }
            if g.batchnorm && g.batch >= 2 && rng.random_bool(0.25) {
                acts.push(Activation::BatchNorm { eps: if rng.random_bool(0.5) { 0.5 } else { 1.0 } });
            }
            if g.softmax && t + 1 == tau && rng.random_bool(0.3) {
                acts.push(Activation::Softmax);
            }
        }
        layers.push(Layer { affine, activations: acts, residual });
    }
    ChainSpec::new(input_dim, g.batch, layers).expect("generator keeps dimensions consistent")
}

/// Input with ‖x₀‖ = norm and parameters u_t ~ N(0, I/p_t).
pub fn random_point(rng: &mut ChaCha8Rng, spec: &ChainSpec, norm: f64) -> (Vector, ParamVector) {
    let x = normal(rng, spec.batch * spec.input_dim);
    let x = &x * (norm / x.norm());
    let u = ParamVector {
        blocks: spec.param_dims().into_iter().map(|p| normal(rng, p) / (p.max(1) as f64).sqrt()).collect(),
    };
    (x, u)
}

/// Uniform point of the ball of radius r in R^p.
pub fn in_ball(rng: &mut ChaCha8Rng, p: usize, r: f64) -> Vector {
    if p == 0 {
        return Vector::zeros(0);
    }
    let d = normal(rng, p);
    let n = d.norm();
    let s: f64 = rng.random::<f64>().powf(1.0 / p as f64);
    d * (r * s / n)
}

/// Central-difference gradient of u ↦ h(f(u)) over all coordinates.
pub fn fd_gradient(spec: &ChainSpec, x0: &Vector, u: &ParamVector, h: &dyn Objective, eps: f64) -> Vector {
    let dims = spec.param_dims();
    let flat = u.to_flat();
    let value = |v: &Vector| {
        let w = ParamVector::from_flat(v.as_slice(), &dims).unwrap();
        h.eval(forward(spec, x0, &w).unwrap().output()).unwrap().0
    };
    Vector::from_fn(flat.len(), |i, _| {
        let mut p = flat.clone();
        p[i] += eps;
        let fp = value(&p);
        p[i] -= 2.0 * eps;
        (fp - value(&p)) / (2.0 * eps)
    })
}

/// Full Jacobian of u ↦ f(u), output × parameters, by one backward sweep per output.
pub fn jacobian(spec: &ChainSpec, x0: &Vector, u: &ParamVector) -> (Vector, Matrix) {
    let tape = forward(spec, x0, u).unwrap();
    let out = tape.output().clone();
    let p: usize = spec.param_dims().iter().sum();
    let mut j = Matrix::zeros(out.len(), p);
    let mut e = Vector::zeros(out.len());
    for i in 0..out.len() {
        e[i] = 1.0;
        let g = tape.backward(&e).unwrap().to_flat();
        j.row_mut(i).copy_from(&g.transpose());
        e[i] = 0.0;
    }
    (out, j)
}

/// Spectral norm through the smaller Gram matrix.
pub fn spectral_norm(a: &Matrix) -> f64 {
    let g = if a.nrows() <= a.ncols() { a * a.transpose() } else { a.transpose() * a };
    if g.is_empty() {
        return 0.0;
    }
    g.symmetric_eigen().eigenvalues.max().max(0.0).sqrt()
}
