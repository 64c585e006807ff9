//! Predictive summaries and evaluation metrics.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::gp_oracle::{gp_predict, GpPosterior};
use crate::network::{forward, forward_and_jacobian, Architecture};
use crate::numerics::{
    gauss_w2_1d, log_sum_exp, standard_normal, GaussianMarginal, Matrix, Rng, Vector,
};
use crate::objective::{LikelihoodKind, LikelihoodParams};
use crate::variational::{sample_weights, VariationalPosterior};

/// Posterior samples used for classification metrics.
pub const CLASSIFICATION_SAMPLES: usize = 100;

/// Per-point predictive distribution. Matrices are `n × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub mean: Matrix,
    /// Standard deviation of the latent function, excluding observation noise.
    pub epistemic_std: Matrix,
    /// Gaussian observation noise `σ_y`, regression only.
    pub noise_std: Option<f64>,
    /// Mean class probabilities over posterior samples.
    pub class_probs: Option<Matrix>,
    /// Mean over posterior samples of the log class probabilities.
    pub class_log_probs: Option<Matrix>,
}

impl PredictiveSummary {
    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `sqrt(epistemic² + σ_y²)` of the first output.
    pub fn total_std(&self) -> Vector {
        let noise = self.noise_std.unwrap_or(0.0);
        Vector::from_fn(self.len(), |i, _| {
            (self.epistemic_std[(i, 0)].powi(2) + noise * noise).sqrt()
        })
    }

    /// Epistemic uncertainty score: latent variance for regression, entropy
    /// of the mean predictive distribution for classification.
    pub fn uncertainty(&self) -> Vector {
        match &self.class_probs {
            Some(p) => entropy(p),
            None => self.epistemic_std.column(0).map(|s| s * s),
        }
    }
}

fn softmax_rows(logits: &Matrix) -> (Matrix, Matrix) {
    let mut probs = logits.clone();
    let mut logp = logits.clone();
    for i in 0..logits.nrows() {
        let row: Vec<f64> = logits.row(i).iter().copied().collect();
        let lse = log_sum_exp(&row);
        for (c, l) in row.iter().enumerate() {
            logp[(i, c)] = l - lse;
            probs[(i, c)] = (l - lse).exp();
        }
    }
    (probs, logp)
}

fn class_summary(draws: &[Matrix]) -> (Matrix, Matrix) {
    let (n, c) = draws[0].shape();
    let mut probs = Matrix::zeros(n, c);
    let mut logp = Matrix::zeros(n, c);
    for d in draws {
        let (p, lp) = softmax_rows(d);
        probs += p;
        logp += lp;
    }
    let k = draws.len() as f64;
    (probs / k, logp / k)
}

fn likelihood_parts(lik: &LikelihoodParams) -> Option<f64> {
    (lik.kind == LikelihoodKind::Gaussian).then(|| lik.noise())
}

/// Predictive of the linearized network: mean `f(x; m)`, latent variance
/// `diag(J S Jᵀ)`. Classification draws `n_samples` linearized logit sets.
pub fn predict_linearized(
    arch: &Architecture,
    q: &VariationalPosterior,
    lik: &LikelihoodParams,
    xs: &Matrix,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<PredictiveSummary> {
    let c = arch.output_dim;
    let n = xs.nrows();
    let (f, jac) = forward_and_jacobian(arch, &q.mean, xs)?;
    let var = jac.component_mul(&jac) * q.variance();
    let mean = Matrix::from_row_slice(n, c, f.as_slice());
    let epistemic_std = Matrix::from_row_slice(n, c, var.map(|v| v.max(0.0).sqrt()).as_slice());
    let (class_probs, class_log_probs) = if lik.kind == LikelihoodKind::Categorical {
        let sigma = q.scale();
        let draws: Vec<Matrix> = (0..n_samples.max(1))
            .map(|_| {
                let eps = Vector::from_fn(q.dim(), |i, _| sigma[i] * standard_normal(rng));
                let logits = &f + &jac * eps;
                Matrix::from_row_slice(n, c, logits.as_slice())
            })
            .collect();
        let (p, lp) = class_summary(&draws);
        (Some(p), Some(lp))
    } else {
        (None, None)
    };
    Ok(PredictiveSummary {
        mean,
        epistemic_std,
        noise_std: likelihood_parts(lik),
        class_probs,
        class_log_probs,
    })
}

/// Predictive from `n_samples` draws through the nonlinear network.
pub fn predict_sampled(
    arch: &Architecture,
    q: &VariationalPosterior,
    lik: &LikelihoodParams,
    xs: &Matrix,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<PredictiveSummary> {
    let k = n_samples.max(2);
    let draws = sample_weights(q, rng, k)
        .iter()
        .map(|w| forward(arch, w, xs))
        .collect::<Result<Vec<_>>>()?;
    let (n, c) = draws[0].shape();
    let mean = draws.iter().fold(Matrix::zeros(n, c), |a, d| a + d) / k as f64;
    let var = draws
        .iter()
        .fold(Matrix::zeros(n, c), |a, d| a + (d - &mean).map(|v| v * v))
        / (k - 1) as f64;
    let (class_probs, class_log_probs) = if lik.kind == LikelihoodKind::Categorical {
        let (p, lp) = class_summary(&draws);
        (Some(p), Some(lp))
    } else {
        (None, None)
    };
    Ok(PredictiveSummary {
        mean,
        epistemic_std: var.map(f64::sqrt),
        noise_std: likelihood_parts(lik),
        class_probs,
        class_log_probs,
    })
}

/// Exact GP predictive, latent marginals plus observation noise `σ_n`.
pub fn predict_gp(post: &GpPosterior, xs: &Matrix) -> Result<PredictiveSummary> {
    let marg = gp_predict(post, xs)?;
    let n = xs.nrows();
    Ok(PredictiveSummary {
        mean: Matrix::from_column_slice(n, 1, marg.mean.as_slice()),
        epistemic_std: Matrix::from_column_slice(n, 1, marg.std().as_slice()),
        noise_std: Some(post.prior.noise),
        class_probs: None,
        class_log_probs: None,
    })
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch(format!(
            "{expected} predictions but {got} targets"
        )));
    }
    Ok(())
}

/// Mean per-point expected log-likelihood of regression targets, in closed
/// form from the predictive mean, latent variance and `σ_y`.
pub fn test_expected_ll_regression(summary: &PredictiveSummary, y: &Vector) -> Result<f64> {
    check_len(summary.len(), y.len())?;
    let noise = summary.noise_std.ok_or_else(|| {
        Error::InvalidParameter("regression score needs a Gaussian likelihood".into())
    })?;
    let s2 = noise * noise;
    let total: f64 = (0..y.len())
        .map(|i| {
            let v = summary.epistemic_std[(i, 0)].powi(2);
            -0.5 * (2.0 * PI * s2).ln() - ((y[i] - summary.mean[(i, 0)]).powi(2) + v) / (2.0 * s2)
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// Mean per-point Monte-Carlo expected log-likelihood of class labels.
pub fn test_expected_ll_classification(
    summary: &PredictiveSummary,
    labels: &[usize],
) -> Result<f64> {
    check_len(summary.len(), labels.len())?;
    let lp = summary.class_log_probs.as_ref().ok_or_else(|| {
        Error::InvalidParameter("classification score needs class probabilities".into())
    })?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= lp.ncols() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: lp.ncols(),
            });
        }
        total += lp[(i, y)];
    }
    Ok(total / labels.len() as f64)
}

pub fn mse(summary: &PredictiveSummary, y: &Vector) -> Result<f64> {
    check_len(summary.len(), y.len())?;
    if y.is_empty() {
        return Err(Error::EmptyInput("targets"));
    }
    Ok((0..y.len())
        .map(|i| (summary.mean[(i, 0)] - y[i]).powi(2))
        .sum::<f64>()
        / y.len() as f64)
}

pub fn accuracy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_len(probs.nrows(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs, *i) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn argmax(m: &Matrix, row: usize) -> usize {
    let mut best = 0;
    for c in 1..m.ncols() {
        if m[(row, c)] > m[(row, best)] {
            best = c;
        }
    }
    best
}

/// Top-label expected calibration error over equal-width confidence bins
/// `(b/n, (b+1)/n]`.
pub fn ece(probs: &Matrix, labels: &[usize], n_bins: usize) -> Result<f64> {
    check_len(probs.nrows(), labels.len())?;
    if labels.is_empty() || n_bins == 0 {
        return Err(Error::EmptyInput("ece inputs"));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    for (i, &y) in labels.iter().enumerate() {
        let pred = argmax(probs, i);
        let conf = probs[(i, pred)];
        let bin = ((conf * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        count[bin] += 1;
        conf_sum[bin] += conf;
        if pred == y {
            correct[bin] += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (correct[b] as f64 / c - conf_sum[b] / c).abs()
        })
        .sum())
}

/// Shannon entropy (nats) of each probability row.
pub fn entropy(probs: &Matrix) -> Vector {
    Vector::from_fn(probs.nrows(), |i, _| {
        -probs
            .row(i)
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    })
}

/// Depth-1 decision stump on a scalar uncertainty, predicting OOD above the
/// threshold. Candidates are `±∞` and midpoints of consecutive distinct
/// pooled values; ties go to the smaller threshold.
pub fn ood_stump_accuracy(id: &[f64], ood: &[f64]) -> Result<(f64, f64)> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::EmptyInput("uncertainty sets"));
    }
    let mut pooled: Vec<f64> = id.iter().chain(ood).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    // Each split is scored at its lower value; the reported threshold is the
    // midpoint unless rounding pushes it onto an endpoint.
    let mut candidates = vec![(f64::NEG_INFINITY, f64::NEG_INFINITY)];
    candidates.extend(pooled.windows(2).map(|w| {
        let mid = 0.5 * (w[0] + w[1]);
        (w[0], if mid > w[0] && mid < w[1] { mid } else { w[0] })
    }));
    candidates.push((f64::INFINITY, f64::INFINITY));
    let total = (id.len() + ood.len()) as f64;
    let score = |t: f64| {
        let id_ok = id.iter().filter(|&&u| u <= t).count();
        let ood_ok = ood.iter().filter(|&&u| u > t).count();
        (id_ok + ood_ok) as f64 / total
    };
    let mut best = (candidates[0].1, score(candidates[0].0));
    for &(split, t) in &candidates[1..] {
        let s = score(split);
        if s > best.1 {
            best = (t, s);
        }
    }
    Ok(best)
}

/// Mean over points of the 1-D Gaussian W2 between the first-output latent
/// marginals of `approx` and the exact marginals.
pub fn pointwise_w2(approx: &PredictiveSummary, exact: &GaussianMarginal) -> Result<f64> {
    check_len(exact.dim(), approx.len())?;
    if exact.dim() == 0 {
        return Err(Error::EmptyInput("evaluation grid"));
    }
    let sd = exact.std();
    let mut total = 0.0;
    for i in 0..exact.dim() {
        total += gauss_w2_1d(
            approx.mean[(i, 0)],
            approx.epistemic_std[(i, 0)],
            exact.mean[i],
            sd[i],
        )?;
    }
    Ok(total / exact.dim() as f64)
}

/// Mean squared second difference over samples (rows) on a uniform grid of
/// spacing `h`, divided by `h⁴`.
pub fn roughness(samples: &Matrix, h: f64) -> Result<f64> {
    let n = samples.ncols();
    if n < 3 {
        return Err(Error::GridTooSmall(n));
    }
    if samples.nrows() == 0 {
        return Err(Error::EmptyInput("samples"));
    }
    let mut total = 0.0;
    for s in samples.row_iter() {
        for i in 1..n - 1 {
            total += (s[i + 1] - 2.0 * s[i] + s[i - 1]).powi(2);
        }
    }
    Ok(total / (samples.nrows() * (n - 2)) as f64 / h.powi(4))
}

/// `k` posterior function draws of the first output on `xs`, one per row.
/// Linearized draws use `f(x; m) + J(w − m)`.
pub fn posterior_function_samples(
    arch: &Architecture,
    q: &VariationalPosterior,
    xs: &Matrix,
    k: usize,
    linearized: bool,
    rng: &mut Rng,
) -> Result<Matrix> {
    let c = arch.output_dim;
    let mut out = Matrix::zeros(k, xs.nrows());
    if linearized {
        let (f, jac) = forward_and_jacobian(arch, &q.mean, xs)?;
        for (r, w) in sample_weights(q, rng, k).iter().enumerate() {
            let vals = &f + &jac * (w - &q.mean);
            for i in 0..xs.nrows() {
                out[(r, i)] = vals[i * c];
            }
        }
    } else {
        for (r, w) in sample_weights(q, rng, k).iter().enumerate() {
            let vals = forward(arch, w, xs)?;
            for i in 0..xs.nrows() {
                out[(r, i)] = vals[(i, 0)];
            }
        }
    }
    Ok(out)
}
