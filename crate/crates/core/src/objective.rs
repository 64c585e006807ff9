//! Loss terms: the regularized KL estimator, expected log-likelihoods and
//! the GFSVI, MFVI and TFSVI objectives with their exact gradients.
//!
//! All losses are negated objectives, meant to be minimized. Network outputs
//! are flattened point-major: row `i·C + k` is output `k` at point `i`. For
//! `C > 1` the GP prior marginal is `K ⊗ I_C` and the KL is taken over the
//! joint `(M·C)`-dimensional marginal.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::gp_oracle::{gp_fit, gp_predict};
use crate::kernels::{gram_sym, PriorSpec};
use crate::network::{
    forward, forward_and_jacobian, jacobian_covariance, jacobian_row_hvp, pushforward_marginal,
    weight_vjp, Architecture,
};
use crate::numerics::{
    cholesky, inverse_from_factor, log_det_from_factor, log_sum_exp, mvn_kl_with_jitter, sigmoid,
    softplus, softplus_inverse, standard_normal, symmetrize, GaussianMarginal, Matrix, Rng, Vector,
};
use crate::trainer::MeasurementSampler;
use crate::variational::{weight_kl_with_grad, VariationalPosterior, WeightPrior};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegKlConfig {
    /// `γ`; both marginal covariances receive `γ·M·I`.
    pub gamma: f64,
    /// First jitter tried by the Cholesky factorizations.
    pub base_jitter: f64,
    /// Differentiate through the Jacobian's dependence on the weight mean.
    /// When false, `J(x; m)` is treated as a constant in every gradient.
    pub jacobian_gradient: bool,
}

impl Default for RegKlConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-10,
            base_jitter: 0.0,
            jacobian_gradient: true,
        }
    }
}

impl RegKlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.base_jitter >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be > 0 and base_jitter >= 0, got {} and {}",
                self.gamma, self.base_jitter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodKind {
    Gaussian,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodParams {
    pub kind: LikelihoodKind,
    /// `σ_y = softplus(raw_noise)`; Gaussian only.
    pub raw_noise: f64,
    /// Monte-Carlo draws per batch; categorical only.
    pub mc_samples: usize,
}

impl LikelihoodParams {
    pub fn gaussian(noise: f64) -> Self {
        Self {
            kind: LikelihoodKind::Gaussian,
            raw_noise: softplus_inverse(noise),
            mc_samples: 1,
        }
    }

    pub fn categorical(mc_samples: usize) -> Self {
        Self {
            kind: LikelihoodKind::Categorical,
            raw_noise: 0.0,
            mc_samples,
        }
    }

    pub fn noise(&self) -> f64 {
        softplus(self.raw_noise)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LikelihoodKind::Categorical && self.mc_samples == 0 {
            return Err(Error::InvalidParameter("mc_samples must be >= 1".into()));
        }
        if self.kind == LikelihoodKind::Gaussian && !(self.noise() > 0.0) {
            return Err(Error::InvalidParameter(
                "observation noise must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Gradient with respect to `(m, raw_scale, raw_noise)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub mean: Vector,
    pub raw_scale: Vector,
    pub raw_noise: f64,
}

/// Loss value with its two parts: `value = −scale·expected_ll + kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub value: f64,
    /// Expected log-likelihood summed over the batch, before `N/B` scaling.
    pub expected_ll: f64,
    pub kl: f64,
}

/// `Σ_i E[log N(y_i | f_i, σ_y²)]` for `f_i ~ N(mean_i, var_i)`.
pub fn expected_ll_gaussian(y: &Vector, mean: &Vector, var: &Vector, sigma_y: f64) -> Result<f64> {
    if y.len() != mean.len() || y.len() != var.len() {
        return Err(Error::ShapeMismatch(format!(
            "targets {}, means {}, variances {}",
            y.len(),
            mean.len(),
            var.len()
        )));
    }
    if !(sigma_y > 0.0) {
        return Err(Error::NegativeScale(sigma_y));
    }
    let s2 = sigma_y * sigma_y;
    let mut total = 0.0;
    for i in 0..y.len() {
        if var[i] < 0.0 {
            return Err(Error::NegativeVariance(var[i]));
        }
        total += -0.5 * LN_2PI - sigma_y.ln() - ((y[i] - mean[i]).powi(2) + var[i]) / (2.0 * s2);
    }
    Ok(total)
}

/// `(1/K) Σ_k Σ_i log softmax(logits_k[i])[y_i]` over `K` draws of `n × C` logits.
pub fn expected_ll_categorical(labels: &[usize], logit_draws: &[Matrix]) -> Result<f64> {
    if logit_draws.is_empty() {
        return Err(Error::EmptyInput("logit draws"));
    }
    let mut total = 0.0;
    for logits in logit_draws {
        if logits.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: logits.nrows(),
            });
        }
        let classes = logits.ncols();
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            let row: Vec<f64> = logits.row(i).iter().copied().collect();
            total += row[y] - log_sum_exp(&row);
        }
    }
    Ok(total / logit_draws.len() as f64)
}

/// Value of a Gaussian KL together with the adjoints the losses need.
struct KlParts {
    value: f64,
    /// `Σ₂⁻¹(m₁ − m₂)`, the gradient with respect to `m₁`.
    alpha: Vector,
    /// Gradient with respect to `Σ₁`.
    dcov1: Option<Matrix>,
    /// Gradient with respect to `Σ₂`.
    dcov2: Option<Matrix>,
}

fn kl_parts(
    m1: &Vector,
    c1: &Matrix,
    m2: &Vector,
    c2: &Matrix,
    base_jitter: f64,
    want_dcov1: bool,
    want_dcov2: bool,
) -> Result<KlParts> {
    let n = m1.len();
    let f1 = cholesky(c1, base_jitter)?;
    let f2 = cholesky(c2, base_jitter)?;
    let a = inverse_from_factor(&f2)?;
    let mut c1_eff = c1.clone();
    for i in 0..n {
        c1_eff[(i, i)] += f1.jitter_applied;
    }
    let d = m1 - m2;
    let alpha = &a * &d;
    let trace = a.component_mul(&c1_eff).sum();
    let value = 0.5
        * (trace + d.dot(&alpha) - n as f64 + log_det_from_factor(&f2) - log_det_from_factor(&f1));
    let dcov1 = if want_dcov1 {
        Some((&a - inverse_from_factor(&f1)?) * 0.5)
    } else {
        None
    };
    let dcov2 = if want_dcov2 {
        let a_c1_a = symmetrize(&(&a * &c1_eff * &a));
        Some((&a - a_c1_a - &alpha * alpha.transpose()) * 0.5)
    } else {
        None
    };
    Ok(KlParts {
        value,
        alpha,
        dcov1,
        dcov2,
    })
}

fn add_diagonal(m: &mut Matrix, v: f64) {
    for i in 0..m.nrows() {
        m[(i, i)] += v;
    }
}

fn check_marginals(q: &GaussianMarginal, p: &GaussianMarginal) -> Result<()> {
    let n = q.dim();
    if n == 0 {
        return Err(Error::EmptyInput("marginal"));
    }
    for (what, m) in [("q", q), ("p", p)] {
        if m.dim() != n || m.cov.nrows() != n || m.cov.ncols() != n {
            return Err(Error::ShapeMismatch(format!(
                "{what} marginal does not have dimension {n}"
            )));
        }
    }
    Ok(())
}

/// Regularized KL estimate `KL(N(m₁, Σ₁ + γM I) ‖ N(m₂, Σ₂ + γM I))` with
/// `M` the marginal dimension.
pub fn reg_kl_estimate(
    q: &GaussianMarginal,
    p: &GaussianMarginal,
    cfg: &RegKlConfig,
) -> Result<f64> {
    check_marginals(q, p)?;
    let jitter = cfg.gamma * q.dim() as f64;
    let mut c1 = q.cov.clone();
    let mut c2 = p.cov.clone();
    add_diagonal(&mut c1, jitter);
    add_diagonal(&mut c2, jitter);
    Ok(kl_parts(&q.mean, &c1, &p.mean, &c2, cfg.base_jitter, false, false)?.value)
}

/// Unregularized estimate: both covariances get only a fixed `jitter`,
/// independent of the dimension.
pub fn naive_kl_estimate(q: &GaussianMarginal, p: &GaussianMarginal, jitter: f64) -> Result<f64> {
    check_marginals(q, p)?;
    mvn_kl_with_jitter(&q.mean, &q.cov, &p.mean, &p.cov, jitter)
}

/// `K ⊗ I_C` for point-major flattening.
pub fn expand_outputs(k: &Matrix, outputs: usize) -> Matrix {
    if outputs == 1 {
        return k.clone();
    }
    let n = k.nrows();
    let mut out = Matrix::zeros(n * outputs, n * outputs);
    for i in 0..n {
        for j in 0..n {
            for c in 0..outputs {
                out[(i * outputs + c, j * outputs + c)] = k[(i, j)];
            }
        }
    }
    out
}

/// GP prior marginal at `xs` for `outputs` independent output functions.
pub fn prior_marginal(prior: &PriorSpec, xs: &Matrix, outputs: usize) -> Result<GaussianMarginal> {
    let k = gram_sym(&prior.kernel, xs)?;
    Ok(GaussianMarginal {
        mean: prior.mean_vector(xs.nrows() * outputs),
        cov: expand_outputs(&k, outputs),
    })
}

/// Gradient accumulator. `var` collects `∂/∂S` and `scale` collects
/// `∂/∂σ`; both are chained to `raw_scale` at the end.
struct Accum {
    mean: Vector,
    var: Vector,
    scale: Vector,
    raw_noise: f64,
}

impl Accum {
    fn new(p: usize) -> Self {
        Self {
            mean: Vector::zeros(p),
            var: Vector::zeros(p),
            scale: Vector::zeros(p),
            raw_noise: 0.0,
        }
    }

    fn finish(self, q: &VariationalPosterior) -> Gradient {
        let sigma = q.scale();
        let slope = q.scale_slope();
        let raw_scale = Vector::from_fn(q.dim(), |i, _| {
            (self.var[i] * 2.0 * sigma[i] + self.scale[i]) * slope[i]
        });
        Gradient {
            mean: self.mean,
            raw_scale,
            raw_noise: self.raw_noise,
        }
    }
}

fn scale_columns(m: &Matrix, s: &Vector) -> Matrix {
    let mut out = m.clone();
    for (j, sv) in s.iter().enumerate() {
        out.column_mut(j).scale_mut(*sv);
    }
    out
}

/// Adds `Σ_r H_r dJ_r` when differentiating through the Jacobian.
fn add_jacobian_path(
    arch: &Architecture,
    m: &Vector,
    xs: &Matrix,
    djac: &Matrix,
    cfg: &RegKlConfig,
    acc: &mut Accum,
) -> Result<()> {
    if cfg.jacobian_gradient {
        acc.mean += jacobian_row_hvp(arch, m, xs, djac)?;
    }
    Ok(())
}

fn batch_scale(batch: &Dataset, n_total: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    Ok(n_total as f64 / batch.len() as f64)
}

fn regression_targets<'a>(batch: &'a Dataset, arch: &Architecture) -> Result<&'a Vector> {
    if arch.output_dim != 1 {
        return Err(Error::InvalidParameter(
            "Gaussian likelihood needs output_dim 1".into(),
        ));
    }
    batch.targets.as_regression().ok_or_else(|| {
        Error::InvalidParameter("Gaussian likelihood needs regression targets".into())
    })
}

fn class_labels<'a>(batch: &'a Dataset, arch: &Architecture) -> Result<&'a [usize]> {
    let labels = batch.targets.as_labels().ok_or_else(|| {
        Error::InvalidParameter("categorical likelihood needs class labels".into())
    })?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= arch.output_dim) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: arch.output_dim,
        });
    }
    Ok(labels)
}

/// Log-softmax at the label and the gradient of `−log p_y` w.r.t. logits.
fn categorical_term(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let grad = logits
        .iter()
        .enumerate()
        .map(|(c, l)| (l - lse).exp() - if c == label { 1.0 } else { 0.0 })
        .collect();
    (logits[label] - lse, grad)
}

/// Expected log-likelihood under the linearized network, accumulating the
/// gradient of `−scale · ell` when `acc` is given.
#[allow(clippy::too_many_arguments)]
fn linearized_ll(
    arch: &Architecture,
    q: &VariationalPosterior,
    batch: &Dataset,
    lik: &LikelihoodParams,
    scale: f64,
    cfg: &RegKlConfig,
    rng: &mut Rng,
    acc: Option<&mut Accum>,
) -> Result<f64> {
    let (f, jac) = forward_and_jacobian(arch, &q.mean, &batch.features)?;
    let var_w = q.variance();
    match lik.kind {
        LikelihoodKind::Gaussian => {
            let y = regression_targets(batch, arch)?;
            let jsq = jac.component_mul(&jac);
            let v = &jsq * &var_w;
            let sy = lik.noise();
            let ell = expected_ll_gaussian(y, &f, &v, sy)?;
            if let Some(acc) = acc {
                let s2 = sy * sy;
                let resid = y - &f;
                let df = &resid * (-scale / s2);
                let dv = scale / (2.0 * s2);
                acc.mean += jac.transpose() * &df;
                acc.var += jsq.row_sum().transpose() * dv;
                let dsy: f64 = resid
                    .iter()
                    .zip(v.iter())
                    .map(|(r, vi)| -1.0 / sy + (r * r + vi) / (s2 * sy))
                    .sum::<f64>()
                    * -scale;
                acc.raw_noise += dsy * sigmoid(lik.raw_noise);
                let djac = scale_columns(&jac, &(&var_w * (2.0 * dv)));
                add_jacobian_path(arch, &q.mean, &batch.features, &djac, cfg, acc)?;
            }
            Ok(ell)
        }
        LikelihoodKind::Categorical => {
            let labels = class_labels(batch, arch)?;
            let c = arch.output_dim;
            let k = lik.mc_samples.max(1);
            let sigma = q.scale();
            let p = q.dim();
            let mut acc = acc;
            let mut djac = acc.as_ref().map(|_| Matrix::zeros(jac.nrows(), p));
            let mut ell = 0.0;
            for _ in 0..k {
                let z = Vector::from_fn(p, |_, _| standard_normal(rng));
                let eps = sigma.component_mul(&z);
                let logits = &f + &jac * &eps;
                let mut dlogit = Vector::zeros(logits.len());
                for (i, &y) in labels.iter().enumerate() {
                    let (lp, g) = categorical_term(&logits.as_slice()[i * c..(i + 1) * c], y);
                    ell += lp / k as f64;
                    for (cc, gv) in g.iter().enumerate() {
                        dlogit[i * c + cc] = scale / k as f64 * gv;
                    }
                }
                if let (Some(acc), Some(djac)) = (acc.as_deref_mut(), djac.as_mut()) {
                    let jt = jac.transpose() * &dlogit;
                    acc.mean += &jt;
                    acc.scale += z.component_mul(&jt);
                    djac.ger(1.0, &dlogit, &eps, 1.0);
                }
            }
            if let (Some(acc), Some(djac)) = (acc, djac) {
                add_jacobian_path(arch, &q.mean, &batch.features, &djac, cfg, acc)?;
            }
            Ok(ell)
        }
    }
}

/// Function-space prior of the KL term.
enum FunctionPrior<'a> {
    Gp(&'a PriorSpec),
    /// Pushforward of `N(0, σ_p² I)` through the linearization at `m`.
    Weight(&'a WeightPrior),
}

fn measurement_kl(
    arch: &Architecture,
    q: &VariationalPosterior,
    prior: FunctionPrior<'_>,
    xs: &Matrix,
    cfg: &RegKlConfig,
    acc: Option<&mut Accum>,
) -> Result<f64> {
    if xs.nrows() == 0 {
        return Err(Error::EmptyInput("measurement points"));
    }
    let (f, jac) = forward_and_jacobian(arch, &q.mean, xs)?;
    let var_w = q.variance();
    let jitter = cfg.gamma * xs.nrows() as f64;
    let mut c1 = jacobian_covariance(&jac, &var_w);
    add_diagonal(&mut c1, jitter);
    let (m2, mut c2) = match prior {
        FunctionPrior::Gp(p) => {
            let marg = prior_marginal(p, xs, arch.output_dim)?;
            (marg.mean, marg.cov)
        }
        FunctionPrior::Weight(wp) => {
            let cov = symmetrize(&(&jac * jac.transpose())) * (wp.scale * wp.scale);
            (&f - &jac * &q.mean, cov)
        }
    };
    add_diagonal(&mut c2, jitter);
    let want_grad = acc.is_some();
    let parts = kl_parts(
        &f,
        &c1,
        &m2,
        &c2,
        cfg.base_jitter,
        want_grad,
        want_grad && matches!(prior, FunctionPrior::Weight(_)),
    )?;
    if let Some(acc) = acc {
        let g1 = parts.dcov1.expect("requested");
        // Σ₁ = J S Jᵀ: ∂/∂S_k = (Jᵀ G₁ J)_kk, ∂/∂J = 2 G₁ J S.
        let t = &g1 * &jac;
        acc.var += jac.component_mul(&t).row_sum().transpose();
        let mut djac = scale_columns(&t, &(&var_w * 2.0));
        acc.mean += jac.transpose() * &parts.alpha;
        if let FunctionPrior::Weight(wp) = prior {
            // m₁ − m₂ = J m, and Σ₂ = σ_p² J Jᵀ.
            djac += &parts.alpha * q.mean.transpose();
            let g2 = parts.dcov2.expect("requested");
            djac += (&g2 * &jac) * (2.0 * wp.scale * wp.scale);
        }
        add_jacobian_path(arch, &q.mean, xs, &djac, cfg, acc)?;
    }
    Ok(parts.value)
}

#[allow(clippy::too_many_arguments)]
fn function_space_loss(
    arch: &Architecture,
    q: &VariationalPosterior,
    prior: FunctionPrior<'_>,
    batch: &Dataset,
    measurement_points: &Matrix,
    lik: &LikelihoodParams,
    cfg: &RegKlConfig,
    n_total: usize,
    rng: &mut Rng,
    want_grad: bool,
) -> Result<(LossTerms, Option<Gradient>)> {
    arch.validate()?;
    let scale = batch_scale(batch, n_total)?;
    let mut acc = want_grad.then(|| Accum::new(q.dim()));
    let ell = linearized_ll(arch, q, batch, lik, scale, cfg, rng, acc.as_mut())?;
    let kl = measurement_kl(arch, q, prior, measurement_points, cfg, acc.as_mut())?;
    let terms = LossTerms {
        value: -scale * ell + kl,
        expected_ll: ell,
        kl,
    };
    Ok((terms, acc.map(|a| a.finish(q))))
}

/// GFSVI loss `−((N/B)·E_q[log p(y | f_L)] − regKL(q_M ‖ p_M))`.
///
/// `rng` feeds the Monte-Carlo draws of the categorical likelihood and is
/// untouched for Gaussian likelihoods.
#[allow(clippy::too_many_arguments)]
pub fn gfsvi_loss(
    arch: &Architecture,
    q: &VariationalPosterior,
    prior: &PriorSpec,
    batch: &Dataset,
    measurement_points: &Matrix,
    lik: &LikelihoodParams,
    cfg: &RegKlConfig,
    n_total: usize,
    rng: &mut Rng,
) -> Result<LossTerms> {
    let p = FunctionPrior::Gp(prior);
    Ok(function_space_loss(
        arch,
        q,
        p,
        batch,
        measurement_points,
        lik,
        cfg,
        n_total,
        rng,
        false,
    )?
    .0)
}

#[allow(clippy::too_many_arguments)]
pub fn gfsvi_loss_with_grad(
    arch: &Architecture,
    q: &VariationalPosterior,
    prior: &PriorSpec,
    batch: &Dataset,
    measurement_points: &Matrix,
    lik: &LikelihoodParams,
    cfg: &RegKlConfig,
    n_total: usize,
    rng: &mut Rng,
) -> Result<(LossTerms, Gradient)> {
    let p = FunctionPrior::Gp(prior);
    let (terms, grad) = function_space_loss(
        arch,
        q,
        p,
        batch,
        measurement_points,
        lik,
        cfg,
        n_total,
        rng,
        true,
    )?;
    Ok((terms, grad.expect("requested")))
}

/// TFSVI loss: as GFSVI but the prior marginal is the pushforward of the
/// weight prior through the same linearization, mean `f(x; m) − J m` and
/// covariance `σ_p² J Jᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn tfsvi_loss(
    arch: &Architecture,
    q: &VariationalPosterior,
    prior: &WeightPrior,
    batch: &Dataset,
    measurement_points: &Matrix,
    lik: &LikelihoodParams,
    cfg: &RegKlConfig,
    n_total: usize,
    rng: &mut Rng,
) -> Result<LossTerms> {
    let p = FunctionPrior::Weight(prior);
    Ok(function_space_loss(
        arch,
        q,
        p,
        batch,
        measurement_points,
        lik,
        cfg,
        n_total,
        rng,
        false,
    )?
    .0)
}

#[allow(clippy::too_many_arguments)]
pub fn tfsvi_loss_with_grad(
    arch: &Architecture,
    q: &VariationalPosterior,
    prior: &WeightPrior,
    batch: &Dataset,
    measurement_points: &Matrix,
    lik: &LikelihoodParams,
    cfg: &RegKlConfig,
    n_total: usize,
    rng: &mut Rng,
) -> Result<(LossTerms, Gradient)> {
    let p = FunctionPrior::Weight(prior);
    let (terms, grad) = function_space_loss(
        arch,
        q,
        p,
        batch,
        measurement_points,
        lik,
        cfg,
        n_total,
        rng,
        true,
    )?;
    Ok((terms, grad.expect("requested")))
}

#[allow(clippy::too_many_arguments)]
fn mfvi_eval(
    arch: &Architecture,
    q: &VariationalPosterior,
    prior: &WeightPrior,
    batch: &Dataset,
    lik: &LikelihoodParams,
    n_total: usize,
    rng: &mut Rng,
    want_grad: bool,
) -> Result<(LossTerms, Option<Gradient>)> {
    arch.validate()?;
    let scale = batch_scale(batch, n_total)?;
    let (w, z) = q.sample_with_noise(rng);
    let out = forward(arch, &w, &batch.features)?;
    let n = batch.len();
    let c = arch.output_dim;
    let mut cot = Matrix::zeros(n, c);
    let mut dnoise = 0.0;
    let ell = match lik.kind {
        LikelihoodKind::Gaussian => {
            let y = regression_targets(batch, arch)?;
            let sy = lik.noise();
            let s2 = sy * sy;
            let mut ell = 0.0;
            for i in 0..n {
                let r = y[i] - out[(i, 0)];
                ell += -0.5 * LN_2PI - sy.ln() - r * r / (2.0 * s2);
                cot[(i, 0)] = -scale * r / s2;
                dnoise += -scale * (-1.0 / sy + r * r / (s2 * sy));
            }
            ell
        }
        LikelihoodKind::Categorical => {
            let labels = class_labels(batch, arch)?;
            let mut ell = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let row: Vec<f64> = out.row(i).iter().copied().collect();
                let (lp, g) = categorical_term(&row, y);
                ell += lp;
                for (cc, gv) in g.iter().enumerate() {
                    cot[(i, cc)] = scale * gv;
                }
            }
            ell
        }
    };
    let (kl, kdm, kdraw) = weight_kl_with_grad(q, prior);
    let terms = LossTerms {
        value: -scale * ell + kl,
        expected_ll: ell,
        kl,
    };
    if !want_grad {
        return Ok((terms, None));
    }
    let g = weight_vjp(arch, &w, &batch.features, &cot)?;
    let slope = q.scale_slope();
    let raw_scale = g.component_mul(&z).component_mul(&slope) + kdraw;
    let raw_noise = if lik.kind == LikelihoodKind::Gaussian {
        dnoise * sigmoid(lik.raw_noise)
    } else {
        0.0
    };
    Ok((
        terms,
        Some(Gradient {
            mean: g + kdm,
            raw_scale,
            raw_noise,
        }),
    ))
}

/// Weight-space ELBO loss with one reparameterized draw through the
/// nonlinear network.
pub fn mfvi_loss(
    arch: &Architecture,
    q: &VariationalPosterior,
    prior: &WeightPrior,
    batch: &Dataset,
    lik: &LikelihoodParams,
    n_total: usize,
    rng: &mut Rng,
) -> Result<LossTerms> {
    Ok(mfvi_eval(arch, q, prior, batch, lik, n_total, rng, false)?.0)
}

pub fn mfvi_loss_with_grad(
    arch: &Architecture,
    q: &VariationalPosterior,
    prior: &WeightPrior,
    batch: &Dataset,
    lik: &LikelihoodParams,
    n_total: usize,
    rng: &mut Rng,
) -> Result<(LossTerms, Gradient)> {
    let (terms, grad) = mfvi_eval(arch, q, prior, batch, lik, n_total, rng, true)?;
    Ok((terms, grad.expect("requested")))
}

/// Source of posterior marginals for the blow-up probe.
pub trait MarginalFamily {
    fn marginal(&self, xs: &Matrix) -> Result<GaussianMarginal>;
}

/// Zero-mean Gaussian process with covariance `Φ Φᵀ`, where `Φ` holds `r`
/// hinge features `max(0, x₀ − κ_i)` at evenly spaced knots. Its marginals
/// have rank at most `r` at any number of points.
#[derive(Debug, Clone)]
pub struct FeaturePosterior {
    pub knots: Vec<f64>,
}

impl FeaturePosterior {
    /// `rank` knots at the midpoints of equal cells of `[lower, upper]`.
    pub fn hinges(rank: usize, lower: f64, upper: f64) -> Self {
        let width = (upper - lower) / rank as f64;
        Self {
            knots: (0..rank)
                .map(|i| lower + (i as f64 + 0.5) * width)
                .collect(),
        }
    }
}

impl MarginalFamily for FeaturePosterior {
    fn marginal(&self, xs: &Matrix) -> Result<GaussianMarginal> {
        let phi = Matrix::from_fn(xs.nrows(), self.knots.len(), |i, k| {
            (xs[(i, 0)] - self.knots[k]).max(0.0)
        });
        Ok(GaussianMarginal {
            mean: Vector::zeros(xs.nrows()),
            cov: symmetrize(&(&phi * phi.transpose())),
        })
    }
}

/// GP prior conditioned on a handful of noisy observations: a
/// nondegenerate posterior whose KL to the prior is finite.
#[derive(Debug, Clone)]
pub struct ConditionedGp {
    pub prior: PriorSpec,
    pub xs: Matrix,
    pub ys: Vector,
}

impl MarginalFamily for ConditionedGp {
    fn marginal(&self, xs: &Matrix) -> Result<GaussianMarginal> {
        gp_predict(&gp_fit(&self.prior, &self.xs, &self.ys)?, xs)
    }
}

/// Linearized network pushforward of a weight posterior.
#[derive(Debug, Clone)]
pub struct Pushforward {
    pub arch: Architecture,
    pub posterior: VariationalPosterior,
}

impl MarginalFamily for Pushforward {
    fn marginal(&self, xs: &Matrix) -> Result<GaussianMarginal> {
        pushforward_marginal(&self.arch, &self.posterior, xs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub m: usize,
    pub naive_kl: f64,
    pub reg_kl: f64,
}

/// KL estimates at nested prefixes of one uniform draw of `max(ms)` points.
///
/// The naive column adds only `gamma_small · I` to both covariances; the
/// regularized column is [`reg_kl_estimate`] with `gamma_reg`.
pub fn kl_blowup_probe(
    family: &dyn MarginalFamily,
    prior: &PriorSpec,
    sampler: &MeasurementSampler,
    ms: &[usize],
    gamma_small: f64,
    gamma_reg: f64,
    rng: &mut Rng,
) -> Result<Vec<ProbeRow>> {
    let max_m = ms
        .iter()
        .copied()
        .max()
        .ok_or(Error::EmptyInput("probe sizes"))?;
    let all = sampler.with_count(max_m).sample(rng)?;
    let cfg = RegKlConfig {
        gamma: gamma_reg,
        ..RegKlConfig::default()
    };
    ms.iter()
        .map(|&m| {
            let xs = all.rows(0, m).into_owned();
            let q = family.marginal(&xs)?;
            let p = prior_marginal(prior, &xs, 1)?;
            Ok(ProbeRow {
                m,
                naive_kl: naive_kl_estimate(&q, &p, gamma_small)?,
                reg_kl: reg_kl_estimate(&q, &p, &cfg)?,
            })
        })
        .collect()
}

/// Ensures a dataset's targets suit a likelihood.
pub fn check_likelihood(lik: &LikelihoodParams, data: &Dataset) -> Result<()> {
    match (lik.kind, &data.targets) {
        (LikelihoodKind::Gaussian, Targets::Regression(_))
        | (LikelihoodKind::Categorical, Targets::Classification { .. }) => Ok(()),
        _ => Err(Error::InvalidParameter(format!(
            "{:?} likelihood does not match the dataset targets",
            lik.kind
        ))),
    }
}
