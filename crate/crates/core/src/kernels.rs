//! GP prior covariance functions and mini-batch marginal-likelihood fitting.
//!
//! Stationary families are written as `amplitude² · g(r)` with `r` the
//! lengthscale-scaled distance. Hyperparameters are fitted in log space.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{
    cholesky, inverse_from_factor, log_det_from_factor, solve_vector, Matrix, Rng, Vector,
};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Matern12,
    Matern32,
    Matern52,
    RationalQuadratic,
    Linear,
    Periodic,
}

impl KernelFamily {
    pub fn is_stationary(self) -> bool {
        !matches!(self, KernelFamily::Linear)
    }
}

/// Covariance function with its hyperparameters.
///
/// `lengthscale` has either one entry (isotropic) or one per feature.
/// `alpha` is only read by the rational-quadratic family, `period` only by
/// the periodic one.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub amplitude: f64,
    pub lengthscale: Vec<f64>,
    pub alpha: f64,
    pub period: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, amplitude: f64, lengthscale: f64) -> Self {
        Self {
            family,
            amplitude,
            lengthscale: vec![lengthscale],
            alpha: 1.0,
            period: 1.0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_period(mut self, period: f64) -> Self {
        self.period = period;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("amplitude", self.amplitude)?;
        if self.lengthscale.is_empty() {
            return Err(Error::InvalidParameter("lengthscale is empty".into()));
        }
        for &l in &self.lengthscale {
            positive("lengthscale", l)?;
        }
        positive("alpha", self.alpha)?;
        positive("period", self.period)
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        let l = self.lengthscale.len();
        if l == 1 || l == d {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: l,
                got: d,
            })
        }
    }

    fn ell(&self, dim: usize) -> f64 {
        if self.lengthscale.len() == 1 {
            self.lengthscale[0]
        } else {
            self.lengthscale[dim]
        }
    }

    /// Unchecked evaluation; slices must share a length compatible with the
    /// lengthscale.
    fn eval_raw(&self, x1: &[f64], x2: &[f64]) -> f64 {
        let s2 = self.amplitude * self.amplitude;
        match self.family {
            KernelFamily::Linear => s2 * (x1.iter().zip(x2).map(|(a, b)| a * b).sum::<f64>() + 1.0),
            KernelFamily::Periodic => {
                let mut acc = 0.0;
                for (d, (a, b)) in x1.iter().zip(x2).enumerate() {
                    let s = (PI * (a - b) / self.period).sin();
                    let l = self.ell(d);
                    acc += s * s / (l * l);
                }
                s2 * (-2.0 * acc).exp()
            }
            _ => s2 * self.correlation(self.scaled_distance(x1, x2)),
        }
    }

    fn scaled_distance(&self, x1: &[f64], x2: &[f64]) -> f64 {
        x1.iter()
            .zip(x2)
            .enumerate()
            .map(|(d, (a, b))| {
                let u = (a - b) / self.ell(d);
                u * u
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Correlation `g(r)` of the stationary distance-based families.
    fn correlation(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::Rbf => (-0.5 * r * r).exp(),
            KernelFamily::Matern12 => (-r).exp(),
            KernelFamily::Matern32 => {
                let t = 3f64.sqrt() * r;
                (1.0 + t) * (-t).exp()
            }
            KernelFamily::Matern52 => {
                let t = 5f64.sqrt() * r;
                (1.0 + t + t * t / 3.0) * (-t).exp()
            }
            KernelFamily::RationalQuadratic => (1.0 + r * r / (2.0 * self.alpha)).powf(-self.alpha),
            KernelFamily::Linear | KernelFamily::Periodic => unreachable!("not distance based"),
        }
    }

    /// `-g'(r)/r`, finite at `r = 0` except for Matérn-1/2 where the caller
    /// multiplies by a factor vanishing faster than `r`.
    fn correlation_slope(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::Rbf => (-0.5 * r * r).exp(),
            KernelFamily::Matern12 => {
                if r > 0.0 {
                    (-r).exp() / r
                } else {
                    0.0
                }
            }
            KernelFamily::Matern32 => 3.0 * (-(3f64.sqrt()) * r).exp(),
            KernelFamily::Matern52 => {
                let t = 5f64.sqrt() * r;
                5.0 / 3.0 * (1.0 + t) * (-t).exp()
            }
            KernelFamily::RationalQuadratic => {
                (1.0 + r * r / (2.0 * self.alpha)).powf(-self.alpha - 1.0)
            }
            KernelFamily::Linear | KernelFamily::Periodic => unreachable!("not distance based"),
        }
    }

    /// Number of free log-hyperparameters (excluding observation noise).
    pub fn n_hyper(&self) -> usize {
        1 + self.lengthscale.len()
            + matches!(
                self.family,
                KernelFamily::RationalQuadratic | KernelFamily::Periodic
            ) as usize
    }

    /// Log-hyperparameters: amplitude, lengthscales, then alpha or period.
    pub fn log_params(&self) -> Vec<f64> {
        let mut v = vec![self.amplitude.ln()];
        v.extend(self.lengthscale.iter().map(|l| l.ln()));
        match self.family {
            KernelFamily::RationalQuadratic => v.push(self.alpha.ln()),
            KernelFamily::Periodic => v.push(self.period.ln()),
            _ => {}
        }
        v
    }

    pub fn set_log_params(&mut self, v: &[f64]) {
        self.amplitude = v[0].exp();
        let nl = self.lengthscale.len();
        for (l, lv) in self.lengthscale.iter_mut().zip(&v[1..1 + nl]) {
            *l = lv.exp();
        }
        match self.family {
            KernelFamily::RationalQuadratic => self.alpha = v[1 + nl].exp(),
            KernelFamily::Periodic => self.period = v[1 + nl].exp(),
            _ => {}
        }
    }

    /// Kernel value and its gradient with respect to [`Self::log_params`].
    fn eval_with_grad(&self, x1: &[f64], x2: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let s2 = self.amplitude * self.amplitude;
        let nl = self.lengthscale.len();
        let k = self.eval_raw(x1, x2);
        grad[0] = 2.0 * k;
        match self.family {
            KernelFamily::Linear => {}
            KernelFamily::Periodic => {
                let p = self.period;
                let mut dp = 0.0;
                for (d, (a, b)) in x1.iter().zip(x2).enumerate() {
                    let delta = a - b;
                    let l = self.ell(d);
                    let s = (PI * delta / p).sin();
                    let slot = if nl == 1 { 1 } else { 1 + d };
                    grad[slot] += k * 4.0 * s * s / (l * l);
                    dp += 2.0 * PI * delta * (2.0 * PI * delta / p).sin() / (p * l * l);
                }
                grad[1 + nl] = k * dp;
            }
            _ => {
                let r = self.scaled_distance(x1, x2);
                let q = self.correlation_slope(r);
                for (d, (a, b)) in x1.iter().zip(x2).enumerate() {
                    let u = (a - b) / self.ell(d);
                    let slot = if nl == 1 { 1 } else { 1 + d };
                    grad[slot] += s2 * q * u * u;
                }
                if self.family == KernelFamily::RationalQuadratic {
                    let alpha = self.alpha;
                    let t = 1.0 + r * r / (2.0 * alpha);
                    grad[1 + nl] = alpha * k * (-t.ln() + r * r / (2.0 * alpha * t));
                }
            }
        }
        k
    }
}

/// GP prior: constant mean, covariance kernel and observation noise.
///
/// The noise only enters marginal-likelihood fitting and the exact GP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorSpecRepr", into = "PriorSpecRepr")]
pub struct PriorSpec {
    pub mean: f64,
    pub kernel: KernelSpec,
    pub noise: f64,
}

impl PriorSpec {
    pub fn new(kernel: KernelSpec, noise: f64) -> Self {
        Self {
            mean: 0.0,
            kernel,
            noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.noise >= 0.0) || !self.mean.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise must be >= 0 (got {}), mean finite (got {})",
                self.noise, self.mean
            )));
        }
        Ok(())
    }

    pub fn mean_vector(&self, n: usize) -> Vector {
        Vector::from_element(n, self.mean)
    }
}

/// Flat JSON form of [`PriorSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorSpecRepr {
    family: KernelFamily,
    amplitude: f64,
    lengthscale: Lengthscale,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    period: Option<f64>,
    #[serde(default)]
    noise: f64,
    #[serde(default)]
    mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Lengthscale {
    Scalar(f64),
    PerDim(Vec<f64>),
}

impl TryFrom<PriorSpecRepr> for PriorSpec {
    type Error = Error;

    fn try_from(r: PriorSpecRepr) -> Result<Self> {
        let lengthscale = match r.lengthscale {
            Lengthscale::Scalar(l) => vec![l],
            Lengthscale::PerDim(v) => v,
        };
        let spec = PriorSpec {
            mean: r.mean,
            kernel: KernelSpec {
                family: r.family,
                amplitude: r.amplitude,
                lengthscale,
                alpha: r.alpha.unwrap_or(1.0),
                period: r.period.unwrap_or(1.0),
            },
            noise: r.noise,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<PriorSpec> for PriorSpecRepr {
    fn from(p: PriorSpec) -> Self {
        let k = p.kernel;
        PriorSpecRepr {
            family: k.family,
            amplitude: k.amplitude,
            lengthscale: if k.lengthscale.len() == 1 {
                Lengthscale::Scalar(k.lengthscale[0])
            } else {
                Lengthscale::PerDim(k.lengthscale)
            },
            alpha: (k.family == KernelFamily::RationalQuadratic).then_some(k.alpha),
            period: (k.family == KernelFamily::Periodic).then_some(k.period),
            noise: p.noise,
            mean: p.mean,
        }
    }
}

/// `k(x1, x2)`.
pub fn kernel_eval(spec: &KernelSpec, x1: &[f64], x2: &[f64]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::DimensionMismatch {
            expected: x1.len(),
            got: x2.len(),
        });
    }
    spec.check_dim(x1.len())?;
    Ok(spec.eval_raw(x1, x2))
}

/// Cross-covariance matrix between the rows of `xs` and the rows of `ys`.
pub fn gram(spec: &KernelSpec, xs: &Matrix, ys: &Matrix) -> Result<Matrix> {
    if xs.ncols() != ys.ncols() {
        return Err(Error::DimensionMismatch {
            expected: xs.ncols(),
            got: ys.ncols(),
        });
    }
    spec.check_dim(xs.ncols())?;
    let rows_x = row_vectors(xs);
    let rows_y = row_vectors(ys);
    Ok(Matrix::from_fn(xs.nrows(), ys.nrows(), |i, j| {
        spec.eval_raw(&rows_x[i], &rows_y[j])
    }))
}

/// Symmetric Gram matrix of one point set.
pub fn gram_sym(spec: &KernelSpec, xs: &Matrix) -> Result<Matrix> {
    spec.check_dim(xs.ncols())?;
    let rows = row_vectors(xs);
    let n = xs.nrows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval_raw(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

pub(crate) fn row_vectors(xs: &Matrix) -> Vec<Vec<f64>> {
    xs.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Settings for mini-batch marginal-likelihood fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 2000,
            learning_rate: 1e-2,
        }
    }
}

/// Smallest noise the fit will start from, so that `log σ_n` is finite.
const MIN_FIT_NOISE: f64 = 1e-6;
const FIT_JITTER: f64 = 1e-10;

/// Log marginal likelihood of a batch and its gradient with respect to the
/// kernel log-parameters followed by `log σ_n`.
pub(crate) fn batch_lml_with_grad(
    prior: &PriorSpec,
    xs: &[Vec<f64>],
    ys: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = xs.len();
    let kernel = &prior.kernel;
    let nh = kernel.n_hyper();
    let mut k = Matrix::zeros(n, n);
    let mut dk: Vec<Matrix> = (0..nh).map(|_| Matrix::zeros(n, n)).collect();
    let mut g = vec![0.0; nh];
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval_with_grad(&xs[i], &xs[j], &mut g);
            k[(i, j)] = v;
            k[(j, i)] = v;
            for (h, gv) in g.iter().enumerate() {
                dk[h][(i, j)] = *gv;
                dk[h][(j, i)] = *gv;
            }
        }
    }
    let noise_var = prior.noise * prior.noise;
    for i in 0..n {
        k[(i, i)] += noise_var;
    }
    let factor = cholesky(&k, FIT_JITTER)?;
    let centered = Vector::from_iterator(n, ys.iter().map(|y| y - prior.mean));
    let alpha = solve_vector(&factor, &centered)?;
    let lml = -0.5 * centered.dot(&alpha)
        - 0.5 * log_det_from_factor(&factor)
        - 0.5 * n as f64 * (2.0 * PI).ln();

    // ∂LML/∂θ = ½ tr((α αᵀ − K⁻¹) ∂K/∂θ)
    let kinv = inverse_from_factor(&factor)?;
    let w = &alpha * alpha.transpose() - kinv;
    let mut grad: Vec<f64> = dk.iter().map(|d| 0.5 * w.component_mul(d).sum()).collect();
    grad.push(w.trace() * noise_var);
    Ok((lml, grad))
}

/// GP log marginal likelihood of a whole point set, used to score fits.
pub fn batch_log_marginal(prior: &PriorSpec, xs: &Matrix, ys: &[f64]) -> Result<f64> {
    let rows = row_vectors(xs);
    Ok(batch_lml_with_grad(prior, &rows, ys)?.0)
}

/// Ascends the mini-batch GP log marginal likelihood with Adam on log-params.
///
/// Each step draws a batch of `min(N, batch_size)` rows without replacement.
pub fn fit_prior_minibatch(
    prior: &PriorSpec,
    data: &Dataset,
    opt: &FitConfig,
    rng: &mut Rng,
) -> Result<PriorSpec> {
    let ys = data
        .targets
        .as_regression()
        .ok_or_else(|| Error::InvalidParameter("prior fitting needs regression targets".into()))?;
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyInput("dataset"));
    }
    prior.kernel.check_dim(data.dim())?;
    let rows = row_vectors(&data.features);
    let batch = opt.batch_size.clamp(1, n);

    let mut current = prior.clone();
    current.noise = current.noise.max(MIN_FIT_NOISE);
    let mut params = current.kernel.log_params();
    params.push(current.noise.ln());
    let mut adam = Adam::new(params.len(), opt.learning_rate);

    for step in 0..opt.steps {
        let (bx, by): (Vec<Vec<f64>>, Vec<f64>) = if batch == n {
            (rows.clone(), ys.iter().copied().collect())
        } else {
            sample_indices(rng, n, batch)
                .into_iter()
                .map(|i| (rows[i].clone(), ys[i]))
                .unzip()
        };
        let (lml, grad) = batch_lml_with_grad(&current, &bx, &by)?;
        if !lml.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        // Adam minimizes; ascend the LML.
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        adam.step(&mut params, &neg);
        let nh = current.kernel.n_hyper();
        current.kernel.set_log_params(&params[..nh]);
        current.noise = params[nh].exp();
    }
    Ok(current)
}
