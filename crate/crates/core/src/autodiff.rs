//! Forward pass, reverse sweep and the automatic-differentiation oracle.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::chain::{Affine, ChainSpec, LayerCache, LayerSparsity, ParamVector};
use crate::error::{dim_err, Error, Result};
use crate::objectives::Objective;
use crate::tensor::Vector;

/// Record of one forward pass: states, stored derivative operators and counters.
///
/// Backward and tangent sweeps take `&self`; the call and multiply counters
/// are atomic so a finished tape can be shared across threads.
#[derive(Debug)]
pub struct Tape {
    spec: ChainSpec,
    params: ParamVector,
    states: Vec<Vector>,
    caches: Vec<LayerCache>,
    forward_ops: u64,
    calls: AtomicUsize,
    backward_ops: AtomicU64,
}

/// Result of one reverse sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub grad: ParamVector,
    /// λ_0, …, λ_τ.
    pub adjoints: Vec<Vector>,
    pub ops: u64,
}

/// x_τ = f_{x₀,τ}(u) with the stored per-layer operators.
pub fn forward(spec: &ChainSpec, x0: &Vector, u: &ParamVector) -> Result<Tape> {
    u.check(spec)?;
    if x0.len() != spec.batch * spec.input_dim {
        return dim_err(format!("input has length {}, chain expects {}", x0.len(), spec.batch * spec.input_dim));
    }
    let mut states = Vec::with_capacity(spec.len() + 1);
    let mut caches = Vec::with_capacity(spec.len());
    let mut ops = 0u64;
    states.push(x0.clone());
    for (t, (layer, ut)) in spec.layers.iter().zip(&u.blocks).enumerate() {
        let x = states.last().expect("non-empty");
        let (y, cache) = layer.forward(x.as_slice(), ut.as_slice(), spec.batch, &mut ops).map_err(|e| match e {
            Error::Numeric { what, .. } => Error::Numeric { layer: t + 1, what },
            other => other,
        })?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric { layer: t + 1, what: format!("non-finite state at coordinate {i}") });
        }
        states.push(y);
        caches.push(cache);
    }
    Ok(Tape {
        spec: spec.clone(),
        params: u.clone(),
        states,
        caches,
        forward_ops: ops,
        calls: AtomicUsize::new(0),
        backward_ops: AtomicU64::new(0),
    })
}

impl Tape {
    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn output(&self) -> &Vector {
        self.states.last().expect("non-empty")
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub(crate) fn caches(&self) -> &[LayerCache] {
        &self.caches
    }

    pub fn forward_ops(&self) -> u64 {
        self.forward_ops
    }

    /// Number of backward and tangent sweeps made on this tape.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    /// Multiplies accumulated over all backward sweeps.
    pub fn backward_ops(&self) -> u64 {
        self.backward_ops.load(Ordering::SeqCst)
    }

    /// (g_1, …, g_τ) = ∇f_{x₀,τ}(u)μ.
    pub fn backward(&self, mu: &Vector) -> Result<ParamVector> {
        Ok(self.backward_full(mu)?.grad)
    }

    /// Reverse sweep keeping every adjoint.
    pub fn backward_full(&self, mu: &Vector) -> Result<Backward> {
        if mu.len() != self.output().len() {
            return dim_err(format!("slope has length {}, output is {}", mu.len(), self.output().len()));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let tau = self.spec.len();
        let mut ops = 0u64;
        let mut adjoints = vec![Vector::zeros(0); tau + 1];
        let mut grads = vec![Vector::zeros(0); tau];
        adjoints[tau] = mu.clone();
        for t in (0..tau).rev() {
            let layer = &self.spec.layers[t];
            let (gx, gu) =
                layer.backward(&self.caches[t], self.params.blocks[t].as_slice(), adjoints[t + 1].as_slice(), &mut ops);
            adjoints[t] = gx;
            grads[t] = gu;
        }
        self.backward_ops.fetch_add(ops, Ordering::SeqCst);
        Ok(Backward { grad: ParamVector { blocks: grads }, adjoints, ops })
    }

    /// Tangent ∇f_{x₀,τ}(u)ᵀ du, one forward sweep through the stored operators.
    pub fn jvp(&self, du: &ParamVector) -> Result<Vector> {
        du.check(&self.spec)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut dx = Vector::zeros(self.states[0].len());
        for (t, layer) in self.spec.layers.iter().enumerate() {
            dx = layer.jvp(&self.caches[t], self.params.blocks[t].as_slice(), dx.as_slice(), du.blocks[t].as_slice());
        }
        Ok(dx)
    }
}

/// h(f_{x₀,τ}(u)) and its gradient in u.
pub fn grad_objective(spec: &ChainSpec, x0: &Vector, u: &ParamVector, h: &dyn Objective) -> Result<(f64, ParamVector)> {
    let tape = forward(spec, x0, u)?;
    let (value, mu) = h.eval(tape.output())?;
    Ok((value, tape.backward(&mu)?))
}

/// Sparsity-based and measured backward cost of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCount {
    pub forward: u64,
    /// Measured multiplies of one backward sweep.
    pub backward: u64,
    pub layers: Vec<LayerSparsity>,
    /// Σ (s_a + 2 s_β + s_{β^u} + s_{β^x}).
    pub formula: u64,
    /// Σ 2 m δ_t (δ_{t-1} + 1), reported for chains of dense layers.
    pub dense_figure: Option<u64>,
}

/// Measures one backward sweep at a seeded random point and compares with
/// the sparsity formula.
pub fn count_backward_cost(spec: &ChainSpec, seed: u64) -> Result<OpCount> {
    let layers = spec.layers.iter().map(|l| l.sparsity(spec.batch)).collect::<Result<Vec<_>>>()?;
    let formula = layers.iter().map(LayerSparsity::backward_cost).sum();
    let m = spec.batch as u64;
    let dense_figure = spec
        .layers
        .iter()
        .map(|l| match l.affine {
            Affine::FullyConnected { inputs, outputs } if !l.residual => Some(2 * m * outputs as u64 * (inputs as u64 + 1)),
            _ => None,
        })
        .sum::<Option<u64>>();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let x0 = normal(spec.batch * spec.input_dim) * 0.5;
    let u = ParamVector {
        blocks: spec.param_dims().into_iter().map(|p| normal(p) / (p.max(1) as f64).sqrt()).collect(),
    };
    let tape = forward(spec, &x0, &u)?;
    let mu = normal(tape.output().len());
    let bw = tape.backward_full(&mu)?;
    Ok(OpCount { forward: tape.forward_ops(), backward: bw.ops, layers, formula, dense_figure })
}
