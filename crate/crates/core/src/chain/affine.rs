//! Bi-affine parts b(x, u) = β(x, u) + β^u(u) + β^x(x) + β⁰.
//!
//! Parameters are shared across the samples of a batch; per-sample outputs
//! are concatenated sample-major.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Matrix, Tensor3, Vector};

use super::activation::axis_cover;

/// Dense bi-affine map on unbatched vectors.
///
/// `beta` has shape d×p×η so that β(x, u) = 𝓑[x, u, ·]; `beta_u` is η×p and
/// `beta_x` is η×d.
#[derive(Debug, Clone, PartialEq)]
pub struct BiAffineForm {
    pub beta: Tensor3,
    pub beta_u: Matrix,
    pub beta_x: Matrix,
    pub beta0: Vector,
}

impl BiAffineForm {
    pub fn new(beta: Tensor3, beta_u: Matrix, beta_x: Matrix, beta0: Vector) -> Result<Self> {
        let (d, p, eta) = beta.dims();
        if beta_u.shape() != (eta, p) || beta_x.shape() != (eta, d) || beta0.len() != eta {
            return dim_err(format!("bi-affine parts do not match a {d}x{p}x{eta} bilinear tensor"));
        }
        Ok(Self { beta, beta_u, beta_x, beta0 })
    }

    pub fn input_dim(&self) -> usize {
        self.beta.dims().0
    }
    pub fn param_dim(&self) -> usize {
        self.beta.dims().1
    }
    pub fn output_dim(&self) -> usize {
        self.beta.dims().2
    }

    pub fn eval(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        Ok(self.beta.apply_xy(x, u)? + &self.beta_u * u + &self.beta_x * x + &self.beta0)
    }

    fn nnz(&self) -> (u64, u64, u64) {
        let count = |m: &Matrix| m.iter().filter(|v| **v != 0.0).count() as u64;
        (self.beta.slices().iter().map(count).sum(), count(&self.beta_u), count(&self.beta_x))
    }
}

/// Convolution geometry over a C×H×W per-sample layout with zero padding.
///
/// Parameters are u = (Vec(W); w⁰) with W ∈ R^{s^f × n^f} column-major, so
/// filter `j` occupies `j*s^f .. (j+1)*s^f` and the biases come last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

/// One tap of one patch: output position `patch` reads input `input` with
/// filter entry `entry`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub patch: usize,
    pub entry: usize,
    pub input: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }
    /// n^p.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
    /// s^f.
    pub fn filter_size(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }
    pub fn input_dim(&self) -> usize {
        self.channels * self.height * self.width
    }
    pub fn output_dim(&self) -> usize {
        self.filters * self.positions()
    }
    pub fn param_dim(&self) -> usize {
        (self.filter_size() + 1) * self.filters
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 || self.filters == 0 || self.channels == 0 {
            return Err(Error::Invalid("conv kernel, stride, filters and channels must be positive".into()));
        }
        if self.height + 2 * self.pad < self.kernel_h || self.width + 2 * self.pad < self.kernel_w {
            return dim_err("conv kernel larger than padded input");
        }
        Ok(())
    }

    /// Patch index lists Π_k flattened into taps, skipping padded positions.
    pub(crate) fn taps(&self) -> Vec<Tap> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut taps = Vec::with_capacity(self.positions() * self.filter_size());
        for oy in 0..oh {
            for ox in 0..ow {
                let patch = oy * ow + ox;
                for c in 0..self.channels {
                    for dy in 0..self.kernel_h {
                        for dx in 0..self.kernel_w {
                            let y = (oy * self.stride + dy) as isize - self.pad as isize;
                            let x = (ox * self.stride + dx) as isize - self.pad as isize;
                            if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
                                continue;
                            }
                            let entry = c * self.kernel_h * self.kernel_w + dy * self.kernel_w + dx;
                            let input = c * self.height * self.width + y as usize * self.width + x as usize;
                            taps.push(Tap { patch, entry, input });
                        }
                    }
                }
            }
        }
        taps
    }

    /// Number of non-padded taps over all patches (n^p s^f under valid padding).
    pub fn tap_count(&self) -> usize {
        let per_axis = |n: usize, k: usize| -> usize {
            let outs = (n + 2 * self.pad - k) / self.stride + 1;
            (0..outs)
                .map(|o| (0..k).filter(|d| (o * self.stride + d) >= self.pad && o * self.stride + d - self.pad < n).count())
                .sum()
        };
        self.channels * per_axis(self.height, self.kernel_h) * per_axis(self.width, self.kernel_w)
    }

    /// max_i |V_i|: the largest number of patches containing one input pixel.
    pub fn max_cover(&self) -> usize {
        axis_cover(self.height, self.kernel_h, self.stride, self.pad) * axis_cover(self.width, self.kernel_w, self.stride, self.pad)
    }
}

/// The bi-affine part of a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Affine {
    /// b(x, u) = x, no parameters.
    Identity { dim: usize },
    /// x̃ = Wᵀz + w⁰, u = (Vec(W); w⁰) with W ∈ R^{inputs×outputs}.
    FullyConnected { inputs: usize, outputs: usize },
    Conv(ConvGeometry),
    /// User-supplied dense form applied per sample.
    Form(BiAffineForm),
}

impl Affine {
    pub fn input_dim(&self) -> usize {
        match self {
            Affine::Identity { dim } => *dim,
            Affine::FullyConnected { inputs, .. } => *inputs,
            Affine::Conv(g) => g.input_dim(),
            Affine::Form(f) => f.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Affine::Identity { dim } => *dim,
            Affine::FullyConnected { outputs, .. } => *outputs,
            Affine::Conv(g) => g.output_dim(),
            Affine::Form(f) => f.output_dim(),
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            Affine::Identity { .. } => 0,
            Affine::FullyConnected { inputs, outputs } => (inputs + 1) * outputs,
            Affine::Conv(g) => g.param_dim(),
            Affine::Form(f) => f.param_dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Affine::Identity { .. } => "identity",
            Affine::FullyConnected { .. } => "dense",
            Affine::Conv(_) => "conv",
            Affine::Form(_) => "custom",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Affine::Conv(g) => g.validate(),
            Affine::FullyConnected { inputs, outputs } if *inputs == 0 || *outputs == 0 => {
                Err(Error::Invalid("dense layer needs positive sizes".into()))
            }
            _ => Ok(()),
        }
    }

    /// Sparsities (s_β, s_{β^u}, s_{β^x}) for a batch of `m`.
    pub fn sparsity(&self, m: usize) -> (u64, u64, u64) {
        let m = m as u64;
        match self {
            Affine::Identity { dim } => (0, 0, m * *dim as u64),
            Affine::FullyConnected { inputs, outputs } => (m * (*inputs * *outputs) as u64, m * *outputs as u64, 0),
            Affine::Conv(g) => (m * (g.filters * g.tap_count()) as u64, m * (g.positions() * g.filters) as u64, 0),
            Affine::Form(f) => {
                let (b, bu, bx) = f.nnz();
                (m * b, m * bu, m * bx)
            }
        }
    }

    fn check(&self, x: &[f64], u: &[f64], m: usize) -> Result<()> {
        if x.len() != m * self.input_dim() {
            return dim_err(format!("{} expects state length {}, got {}", self.name(), m * self.input_dim(), x.len()));
        }
        if u.len() != self.param_dim() {
            return dim_err(format!("{} expects {} parameters, got {}", self.name(), self.param_dim(), u.len()));
        }
        Ok(())
    }

    /// b(x, u) on a batch of `m` samples.
    pub(crate) fn apply(&self, x: &[f64], u: &[f64], m: usize, ops: &mut u64) -> Result<Vector> {
        self.check(x, u, m)?;
        let (din, dout) = (self.input_dim(), self.output_dim());
        let mut out = Vector::zeros(m * dout);
        match self {
            Affine::Identity { .. } => {
                out.copy_from_slice(x);
                *ops += x.len() as u64;
            }
            Affine::FullyConnected { inputs, outputs } => {
                let (w, b) = u.split_at(inputs * outputs);
                for s in 0..m {
                    let z = &x[s * din..(s + 1) * din];
                    for j in 0..*outputs {
                        let col = &w[j * inputs..(j + 1) * inputs];
                        out[s * dout + j] = col.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + b[j];
                    }
                }
                *ops += (m * (inputs + 1) * outputs) as u64;
            }
            Affine::Conv(g) => {
                let taps = g.taps();
                let (sf, np) = (g.filter_size(), g.positions());
                let bias = &u[sf * g.filters..];
                for s in 0..m {
                    let z = &x[s * din..(s + 1) * din];
                    let o = &mut out.as_mut_slice()[s * dout..(s + 1) * dout];
                    for j in 0..g.filters {
                        let w = &u[j * sf..(j + 1) * sf];
                        for k in 0..np {
                            o[k + np * j] = bias[j];
                        }
                        for t in &taps {
                            o[t.patch + np * j] += w[t.entry] * z[t.input];
                        }
                    }
                }
                *ops += (m * g.filters * (taps.len() + np)) as u64;
            }
            Affine::Form(f) => {
                let uu = Vector::from_column_slice(u);
                for s in 0..m {
                    let z = Vector::from_column_slice(&x[s * din..(s + 1) * din]);
                    out.rows_mut(s * dout, dout).copy_from(&f.eval(&z, &uu)?);
                }
                let (b, bu, bx) = self.sparsity(m);
                *ops += b + bu + bx;
            }
        }
        Ok(out)
    }

    /// (∇_x b·λ, ∇_u b·λ) on a batch, counting one unit per structural nonzero.
    pub(crate) fn vjp(&self, x: &[f64], u: &[f64], lambda: &[f64], m: usize, ops: &mut u64) -> (Vector, Vector) {
        let (din, dout) = (self.input_dim(), self.output_dim());
        let mut gx = Vector::zeros(m * din);
        let mut gu = Vector::zeros(self.param_dim());
        match self {
            Affine::Identity { .. } => {
                gx.copy_from_slice(lambda);
                *ops += lambda.len() as u64;
            }
            Affine::FullyConnected { inputs, outputs } => {
                let (w, _) = u.split_at(inputs * outputs);
                for s in 0..m {
                    let z = &x[s * din..(s + 1) * din];
                    let lam = &lambda[s * dout..(s + 1) * dout];
                    for i in 0..*inputs {
                        let mut acc = 0.0;
                        for j in 0..*outputs {
                            acc += w[i + inputs * j] * lam[j];
                        }
                        gx[s * din + i] = acc;
                    }
                    for j in 0..*outputs {
                        for i in 0..*inputs {
                            gu[i + inputs * j] += z[i] * lam[j];
                        }
                        gu[inputs * outputs + j] += lam[j];
                    }
                }
                *ops += (m * (2 * inputs * outputs + outputs)) as u64;
            }
            Affine::Conv(g) => {
                let taps = g.taps();
                let (sf, np) = (g.filter_size(), g.positions());
                for s in 0..m {
                    let z = &x[s * din..(s + 1) * din];
                    let lam = &lambda[s * dout..(s + 1) * dout];
                    for j in 0..g.filters {
                        for t in &taps {
                            let l = lam[t.patch + np * j];
                            gx[s * din + t.input] += u[j * sf + t.entry] * l;
                            gu[j * sf + t.entry] += z[t.input] * l;
                        }
                        for k in 0..np {
                            gu[sf * g.filters + j] += lam[k + np * j];
                        }
                    }
                }
                *ops += (m * g.filters * (2 * taps.len() + np)) as u64;
            }
            Affine::Form(f) => {
                let (d, p, eta) = f.beta.dims();
                for s in 0..m {
                    let z = &x[s * din..(s + 1) * din];
                    let lam = &lambda[s * dout..(s + 1) * dout];
                    for (k, slice) in f.beta.slices().iter().enumerate() {
                        for i in 0..d {
                            for q in 0..p {
                                let b = slice[(i, q)];
                                if b != 0.0 {
                                    gx[s * din + i] += b * u[q] * lam[k];
                                    gu[q] += b * z[i] * lam[k];
                                    *ops += 2;
                                }
                            }
                        }
                    }
                    for (o, &lo) in lam.iter().enumerate().take(eta) {
                        for q in 0..p {
                            let b = f.beta_u[(o, q)];
                            if b != 0.0 {
                                gu[q] += b * lo;
                                *ops += 1;
                            }
                        }
                        for i in 0..d {
                            let b = f.beta_x[(o, i)];
                            if b != 0.0 {
                                gx[s * din + i] += b * lo;
                                *ops += 1;
                            }
                        }
                    }
                }
            }
        }
        (gx, gu)
    }

    /// Forward tangent β(dx, u) + β(x, du) + β^u du + β^x dx.
    pub(crate) fn jvp(&self, x: &[f64], u: &[f64], dx: &[f64], du: &[f64], m: usize) -> Vector {
        let mut scratch = 0u64;
        match self {
            Affine::Identity { .. } => Vector::from_column_slice(dx),
            Affine::FullyConnected { .. } | Affine::Conv(_) => {
                // Linear in x for fixed u, linear in u for fixed x; the bias enters only through du.
                let mut u_no_bias = u.to_vec();
                let nb = match self {
                    Affine::FullyConnected { outputs, .. } => *outputs,
                    Affine::Conv(g) => g.filters,
                    _ => unreachable!(),
                };
                let plen = u.len();
                for v in &mut u_no_bias[plen - nb..] {
                    *v = 0.0;
                }
                let a = self.apply(dx, &u_no_bias, m, &mut scratch).expect("shapes checked by caller");
                let b = self.apply(x, du, m, &mut scratch).expect("shapes checked by caller");
                a + b
            }
            Affine::Form(f) => {
                let (din, dout) = (self.input_dim(), self.output_dim());
                let uu = Vector::from_column_slice(u);
                let duu = Vector::from_column_slice(du);
                let mut out = Vector::zeros(m * dout);
                for s in 0..m {
                    let z = Vector::from_column_slice(&x[s * din..(s + 1) * din]);
                    let dz = Vector::from_column_slice(&dx[s * din..(s + 1) * din]);
                    let v = f.beta.apply_xy(&dz, &uu).expect("dims")
                        + f.beta.apply_xy(&z, &duu).expect("dims")
                        + &f.beta_u * &duu
                        + &f.beta_x * &dz;
                    out.rows_mut(s * dout, dout).copy_from(&v);
                }
                out
            }
        }
    }

    /// 𝓑[·, u, λ]: x-gradient of the bilinear part only.
    pub(crate) fn bilinear_x_vjp(&self, u: &[f64], lambda: &[f64], m: usize) -> Vector {
        let din = self.input_dim();
        match self {
            Affine::Identity { .. } => Vector::zeros(m * din),
            Affine::FullyConnected { .. } | Affine::Conv(_) => {
                let mut scratch = 0u64;
                let x0 = vec![0.0; m * din];
                self.vjp(&x0, u, lambda, m, &mut scratch).0
            }
            Affine::Form(f) => {
                let dout = self.output_dim();
                let uu = Vector::from_column_slice(u);
                let mut gx = Vector::zeros(m * din);
                for s in 0..m {
                    let lam = Vector::from_column_slice(&lambda[s * dout..(s + 1) * dout]);
                    let g = f.beta.apply_z(&lam).expect("dims") * &uu;
                    gx.rows_mut(s * din, din).copy_from(&g);
                }
                gx
            }
        }
    }

    /// Dense form of the batched map on the concatenated state.
    pub fn materialize(&self, m: usize) -> BiAffineForm {
        let (d, p, eta) = (m * self.input_dim(), self.param_dim(), m * self.output_dim());
        let mut scratch = 0u64;
        let zx = vec![0.0; d];
        let zu = vec![0.0; p];
        let b0 = self.apply(&zx, &zu, m, &mut scratch).expect("consistent dims");
        let mut beta_u = Matrix::zeros(eta, p);
        let mut e = vec![0.0; p];
        for k in 0..p {
            e[k] = 1.0;
            let col = self.apply(&zx, &e, m, &mut scratch).expect("consistent dims") - &b0;
            beta_u.set_column(k, &col);
            e[k] = 0.0;
        }
        let mut beta_x = Matrix::zeros(eta, d);
        let mut ex = vec![0.0; d];
        for i in 0..d {
            ex[i] = 1.0;
            let col = self.apply(&ex, &zu, m, &mut scratch).expect("consistent dims") - &b0;
            beta_x.set_column(i, &col);
            ex[i] = 0.0;
        }
        let mut slices = vec![Matrix::zeros(d, p); eta];
        let mut lam = vec![0.0; eta];
        for o in 0..eta {
            lam[o] = 1.0;
            for k in 0..p {
                e[k] = 1.0;
                let col = self.bilinear_x_vjp(&e, &lam, m);
                slices[o].set_column(k, &col);
                e[k] = 0.0;
            }
            lam[o] = 0.0;
        }
        let beta = if eta == 0 { Tensor3::zeros(d, p, 0) } else { Tensor3::new(slices).expect("uniform slices") };
        BiAffineForm { beta, beta_u, beta_x, beta0: b0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_hand_example() {
        // 1-D input (1,2,3), one filter (1,1), stride 1, zero bias.
        let g = ConvGeometry { channels: 1, height: 1, width: 3, filters: 1, kernel_h: 1, kernel_w: 2, stride: 1, pad: 0 };
        let mut ops = 0;
        let y = Affine::Conv(g).apply(&[1.0, 2.0, 3.0], &[1.0, 1.0, 0.0], 1, &mut ops).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 5.0]);
    }

    #[test]
    fn same_padding_keeps_spatial_size() {
        let g = ConvGeometry { channels: 3, height: 224, width: 224, filters: 64, kernel_h: 3, kernel_w: 3, stride: 1, pad: 1 };
        assert_eq!(g.positions(), 224 * 224);
        assert_eq!(g.max_cover(), 9);
    }

    #[test]
    fn tap_count_matches_taps() {
        let g = ConvGeometry { channels: 2, height: 4, width: 5, filters: 1, kernel_h: 3, kernel_w: 2, stride: 2, pad: 1 };
        assert_eq!(g.tap_count(), g.taps().len());
    }
}
