//! Fully-connected networks, exact weight Jacobians and the linearization
//! `f_L(x; w) = f(x; m) + J(x; m)(w − m)`.
//!
//! # Weight layout
//!
//! Layers are concatenated input to output. Each layer stores its weight
//! matrix of shape `(out, in)` row-major, followed by its `out` biases. This
//! layout is relied on everywhere a flat weight index appears.
//!
//! Derivatives use hand-written layer backward rules. The same code runs on
//! plain `f64` and on [`Dual`] numbers; running the backward pass on duals
//! gives Hessian-vector products, which is how gradients flow through the
//! Jacobian's dependence on the weights.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{GaussianMarginal, Matrix, Rng, Vector};
use crate::variational::VariationalPosterior;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// MLP shape. The activation applies to hidden layers; the output is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "all layer widths must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Number of weights `p`, biases included.
    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    /// Glorot-uniform limit `sqrt(6 / (fan_in + fan_out))` of the layer
    /// owning each flat weight index.
    pub fn glorot_limits(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (i, o) in self.layers() {
            let limit = (6.0 / (i + o) as f64).sqrt();
            out.extend(std::iter::repeat_n(limit, (i + 1) * o));
        }
        out
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot_init(&self, rng: &mut Rng) -> Vector {
        let mut w = Vec::with_capacity(self.n_params());
        for (i, o) in self.layers() {
            let limit = (6.0 / (i + o) as f64).sqrt();
            for _ in 0..i * o {
                w.push(rng.random_range(-limit..limit));
            }
            w.extend(std::iter::repeat_n(0.0, o));
        }
        Vector::from_vec(w)
    }

    fn check_weights(&self, len: usize) -> Result<()> {
        let p = self.n_params();
        if len != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: len,
            });
        }
        Ok(())
    }

    fn check_inputs(&self, xs: &Matrix) -> Result<()> {
        if xs.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: xs.ncols(),
            });
        }
        Ok(())
    }
}

/// Arithmetic needed by the forward and backward passes.
pub(crate) trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> + AddAssign
{
    fn constant(v: f64) -> Self;
    fn value(self) -> f64;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Forward-mode dual number `re + ε·eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            re: self.re + o.re,
            eps: self.eps + o.eps,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            re: self.re - o.re,
            eps: self.eps - o.eps,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            re: self.re * o.re,
            eps: self.re * o.eps + self.eps * o.re,
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            re: -self.re,
            eps: -self.eps,
        }
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}

impl Scalar for Dual {
    fn constant(v: f64) -> Self {
        Dual { re: v, eps: 0.0 }
    }
    fn value(self) -> f64 {
        self.re
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual {
            re: t,
            eps: self.eps * (1.0 - t * t),
        }
    }
}

/// Layer outputs of one forward pass; `acts[0]` is the input and the last
/// entry the (linear) network output.
fn forward_tape<T: Scalar>(arch: &Architecture, w: &[T], x: &[f64]) -> Vec<Vec<T>> {
    let layers = arch.layers();
    let n_layers = layers.len();
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(n_layers + 1);
    acts.push(x.iter().map(|&v| T::constant(v)).collect());
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let input = &acts[l];
        let weights = &w[offset..offset + fan_in * fan_out];
        let biases = &w[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        let mut out = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            let mut acc = biases[o];
            for (wi, xi) in row.iter().zip(input) {
                acc += *wi * *xi;
            }
            out.push(if l + 1 < n_layers {
                activate(arch.activation, acc)
            } else {
                acc
            });
        }
        offset += (fan_in + 1) * fan_out;
        acts.push(out);
    }
    acts
}

fn activate<T: Scalar>(act: Activation, v: T) -> T {
    match act {
        Activation::Tanh => v.tanh(),
        Activation::Relu => {
            if v.value() > 0.0 {
                v
            } else {
                T::constant(0.0)
            }
        }
    }
}

/// Derivative of the activation expressed through its output `a`.
/// ReLU uses subgradient 0 at the kink.
fn activation_slope<T: Scalar>(act: Activation, a: T) -> T {
    match act {
        Activation::Tanh => T::constant(1.0) - a * a,
        Activation::Relu => T::constant(if a.value() > 0.0 { 1.0 } else { 0.0 }),
    }
}

/// Vector-Jacobian product: writes `cotᵀ ∂f/∂w` into `grad`.
fn backward<T: Scalar>(arch: &Architecture, w: &[T], acts: &[Vec<T>], cot: &[T], grad: &mut [T]) {
    let layers = arch.layers();
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for &(i, o) in &layers {
        offsets.push(off);
        off += (i + 1) * o;
    }
    let mut delta: Vec<T> = cot.to_vec();
    for l in (0..layers.len()).rev() {
        let (fan_in, fan_out) = layers[l];
        let offset = offsets[l];
        let input = &acts[l];
        for o in 0..fan_out {
            let d = delta[o];
            let g_row = &mut grad[offset + o * fan_in..offset + (o + 1) * fan_in];
            for (g, xi) in g_row.iter_mut().zip(input) {
                *g = d * *xi;
            }
            grad[offset + fan_in * fan_out + o] = d;
        }
        if l == 0 {
            break;
        }
        let weights = &w[offset..offset + fan_in * fan_out];
        let mut next = vec![T::constant(0.0); fan_in];
        for o in 0..fan_out {
            let d = delta[o];
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            for (n, wi) in next.iter_mut().zip(row) {
                *n += *wi * d;
            }
        }
        for (n, a) in next.iter_mut().zip(input) {
            *n = *n * activation_slope(arch.activation, *a);
        }
        delta = next;
    }
}

fn row(xs: &Matrix, i: usize) -> Vec<f64> {
    xs.row(i).iter().copied().collect()
}

/// Network outputs, one row per input point.
pub fn forward(arch: &Architecture, w: &Vector, xs: &Matrix) -> Result<Matrix> {
    arch.check_weights(w.len())?;
    arch.check_inputs(xs)?;
    let c = arch.output_dim;
    let mut out = Matrix::zeros(xs.nrows(), c);
    for i in 0..xs.nrows() {
        let acts = forward_tape(arch, w.as_slice(), &row(xs, i));
        for k in 0..c {
            out[(i, k)] = acts.last().unwrap()[k];
        }
    }
    Ok(out)
}

/// Outputs flattened point-major together with the Jacobian
/// `(n·C) × p`, row `i·C + k` holding `∂f_k(x_i)/∂w`.
pub fn forward_and_jacobian(
    arch: &Architecture,
    m: &Vector,
    xs: &Matrix,
) -> Result<(Vector, Matrix)> {
    arch.check_weights(m.len())?;
    arch.check_inputs(xs)?;
    let c = arch.output_dim;
    let p = arch.n_params();
    let n = xs.nrows();
    let mut f = Vector::zeros(n * c);
    let mut jac = Matrix::zeros(n * c, p);
    let mut grad = vec![0.0; p];
    let mut cot = vec![0.0; c];
    for i in 0..n {
        let acts = forward_tape(arch, m.as_slice(), &row(xs, i));
        for k in 0..c {
            f[i * c + k] = acts.last().unwrap()[k];
            cot.iter_mut().for_each(|v| *v = 0.0);
            cot[k] = 1.0;
            backward(arch, m.as_slice(), &acts, &cot, &mut grad);
            for (j, g) in grad.iter().enumerate() {
                jac[(i * c + k, j)] = *g;
            }
        }
    }
    Ok((f, jac))
}

/// `J(xs; m)`.
pub fn jacobian(arch: &Architecture, m: &Vector, xs: &Matrix) -> Result<Matrix> {
    Ok(forward_and_jacobian(arch, m, xs)?.1)
}

/// `f(xs; m) + J(xs; m)(w − m)`, one row per point.
pub fn linearized_forward(
    arch: &Architecture,
    m: &Vector,
    w: &Vector,
    xs: &Matrix,
) -> Result<Matrix> {
    arch.check_weights(w.len())?;
    let (f, jac) = forward_and_jacobian(arch, m, xs)?;
    let flat = f + jac * (w - m);
    Ok(unflatten(&flat, arch.output_dim))
}

/// Reshapes a point-major flat vector into `n × C`.
pub fn unflatten(flat: &Vector, outputs: usize) -> Matrix {
    Matrix::from_row_slice(flat.len() / outputs, outputs, flat.as_slice())
}

/// Marginal of the linearized pushforward GP at `xs`:
/// mean `f(xs; m)`, covariance `J S Jᵀ`.
pub fn pushforward_marginal(
    arch: &Architecture,
    posterior: &VariationalPosterior,
    xs: &Matrix,
) -> Result<GaussianMarginal> {
    arch.check_weights(posterior.dim())?;
    let (mean, jac) = forward_and_jacobian(arch, &posterior.mean, xs)?;
    let cov = jacobian_covariance(&jac, &posterior.variance());
    Ok(GaussianMarginal { mean, cov })
}

/// `J diag(s) Jᵀ`, exactly symmetric.
pub fn jacobian_covariance(jac: &Matrix, s: &Vector) -> Matrix {
    let mut scaled = jac.clone();
    for (j, sv) in s.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*sv);
    }
    let c = &scaled * jac.transpose();
    crate::numerics::symmetrize(&c)
}

/// `Σ_i cot_iᵀ ∂f(x_i; w)/∂w` for a cotangent matrix of shape `n × C`.
pub fn weight_vjp(arch: &Architecture, w: &Vector, xs: &Matrix, cot: &Matrix) -> Result<Vector> {
    arch.check_weights(w.len())?;
    arch.check_inputs(xs)?;
    let p = arch.n_params();
    let mut total = Vector::zeros(p);
    let mut grad = vec![0.0; p];
    for i in 0..xs.nrows() {
        let acts = forward_tape(arch, w.as_slice(), &row(xs, i));
        let c: Vec<f64> = cot.row(i).iter().copied().collect();
        backward(arch, w.as_slice(), &acts, &c, &mut grad);
        for (t, g) in total.iter_mut().zip(&grad) {
            *t += g;
        }
    }
    Ok(total)
}

/// `Σ_r H_r u_r` where `H_r` is the weight Hessian of Jacobian row `r`
/// (point `r / C`, output `r % C`) at `m` and `u_r` is row `r` of `dirs`.
///
/// Equivalently, the gradient with respect to `m` of `Σ_r J_r(m) · u_r`.
pub fn jacobian_row_hvp(
    arch: &Architecture,
    m: &Vector,
    xs: &Matrix,
    dirs: &Matrix,
) -> Result<Vector> {
    arch.check_weights(m.len())?;
    arch.check_inputs(xs)?;
    let c = arch.output_dim;
    let p = arch.n_params();
    if dirs.nrows() != xs.nrows() * c || dirs.ncols() != p {
        return Err(Error::ShapeMismatch(format!(
            "directions are {}x{}, expected {}x{}",
            dirs.nrows(),
            dirs.ncols(),
            xs.nrows() * c,
            p
        )));
    }
    let mut total = Vector::zeros(p);
    let mut w = vec![Dual { re: 0.0, eps: 0.0 }; p];
    let mut grad = vec![Dual { re: 0.0, eps: 0.0 }; p];
    let zero = Dual::constant(0.0);
    for r in 0..dirs.nrows() {
        let dir = dirs.row(r);
        if dir.iter().all(|v| *v == 0.0) {
            continue;
        }
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = Dual {
                re: m[j],
                eps: dir[j],
            };
        }
        let acts = forward_tape(arch, &w, &row(xs, r / c));
        let mut cot = vec![zero; c];
        cot[r % c] = Dual::constant(1.0);
        backward(arch, &w, &acts, &cot, &mut grad);
        for (t, g) in total.iter_mut().zip(&grad) {
            *t += g.eps;
        }
    }
    Ok(total)
}
