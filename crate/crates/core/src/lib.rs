//! Chains of computations h(f_τ(…f_1(x₀, u_1)…, u_τ)): oracles, Newton steps by
//! dynamic programming, smoothness certificates and projected gradient training.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod autodiff;
pub mod chain;
pub mod cli;
pub mod error;
pub mod implicit;
pub mod objectives;
pub mod oracles;
pub mod report;
pub mod smoothness;
pub mod tensor;
pub mod trainer;

pub use autodiff::{forward, grad_objective, Tape};
pub use chain::{Activation, Affine, ChainSpec, Layer, ParamVector};
pub use error::{Error, Result};
pub use smoothness::{BoundedDomain, Mag, SmoothTriple};
