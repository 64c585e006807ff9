//! Dense linear algebra and Gaussian helpers shared by every other module.
//!
//! Matrices are `nalgebra` dense matrices of `f64`. The one piece of policy
//! living here is the jitter escalation in [`cholesky`]: callers never retry a
//! failed factorization themselves.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Generator used for every stochastic operation.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a sub-seed from a master seed and a role name.
///
/// Stable across platforms and releases: the first 8 bytes of
/// SHA-256(master || role).
pub fn derive_seed(master: u64, role: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(role.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Finite-dimensional Gaussian: a GP measure restricted to a point set.
///
/// For multi-output functions entries are ordered point-major: index
/// `i * outputs + k` holds output `k` at point `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMarginal {
    pub mean: Vector,
    pub cov: Matrix,
}

impl GaussianMarginal {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal standard deviations, clamping tiny negative round-off to 0.
    pub fn std(&self) -> Vector {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Lower Cholesky factor of `A + jitter_applied * I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub lower: Matrix,
    pub jitter_applied: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }
}

/// Cap on escalated jitter, relative to the mean diagonal.
const JITTER_CAP_FRACTION: f64 = 1e-2;

/// Factorizes a symmetric matrix, escalating diagonal jitter by ×10 on failure.
///
/// The first attempt uses `base_jitter` as is. When that is zero the first
/// escalation starts at machine epsilon times the mean diagonal. Escalation
/// stops at `1e-2 * mean(diag(a))`.
pub fn cholesky(a: &Matrix, base_jitter: f64) -> Result<CholeskyFactor> {
    let n = a.nrows();
    if n != a.ncols() || n == 0 {
        return Err(Error::NonSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    check_symmetric(a)?;
    let mean_diag = a.diagonal().iter().sum::<f64>() / n as f64;
    let cap = JITTER_CAP_FRACTION * mean_diag.abs();

    if let Some(lower) = try_cholesky(a, base_jitter) {
        return Ok(CholeskyFactor {
            lower,
            jitter_applied: base_jitter,
        });
    }
    let mut jitter = if base_jitter > 0.0 {
        base_jitter * 10.0
    } else {
        f64::EPSILON * mean_diag.abs().max(f64::MIN_POSITIVE)
    };
    while jitter <= cap {
        if let Some(lower) = try_cholesky(a, jitter) {
            return Ok(CholeskyFactor {
                lower,
                jitter_applied: jitter,
            });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { max_jitter: cap })
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    let n = a.nrows();
    let scale = a
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if worst > 1e-8 * scale {
        return Err(Error::NotSymmetric { asymmetry: worst });
    }
    Ok(())
}

/// Plain Cholesky–Crout on `a + jitter I`, reading the lower triangle.
/// Returns `None` on a non-positive or non-finite pivot.
fn try_cholesky(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.nrows();
    // Row-major scratch so inner products run over contiguous memory.
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let (upto_j, below) = l.split_at_mut((j + 1) * n);
        let row_j = &mut upto_j[j * n..];
        let diag = a[(j, j)] + jitter - dot(&row_j[..j], &row_j[..j]);
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        row_j[j] = ljj;
        for (offset, row_i) in below.chunks_exact_mut(n).enumerate() {
            let i = j + 1 + offset;
            row_i[j] = (a[(i, j)] - dot(&row_i[..j], &row_j[..j])) / ljj;
        }
    }
    Some(Matrix::from_row_slice(n, n, &l))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `(L Lᵀ) x = b` for every column of `b`.
pub fn solve_with_factor(f: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    if f.dim() != b.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "factor is {}x{}, right-hand side has {} rows",
            f.dim(),
            f.dim(),
            b.nrows()
        )));
    }
    let y = f
        .lower
        .solve_lower_triangular(b)
        .ok_or(Error::NotPositiveDefinite {
            max_jitter: f.jitter_applied,
        })?;
    f.lower
        .tr_solve_lower_triangular(&y)
        .ok_or(Error::NotPositiveDefinite {
            max_jitter: f.jitter_applied,
        })
}

pub fn solve_vector(f: &CholeskyFactor, b: &Vector) -> Result<Vector> {
    let x = solve_with_factor(f, &Matrix::from_column_slice(b.len(), 1, b.as_slice()))?;
    Ok(x.column(0).into_owned())
}

/// Explicit inverse `(L Lᵀ)⁻¹`, symmetrized.
pub fn inverse_from_factor(f: &CholeskyFactor) -> Result<Matrix> {
    let n = f.dim();
    let inv = solve_with_factor(f, &Matrix::identity(n, n))?;
    Ok(symmetrize(&inv))
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// `log det(L Lᵀ) = 2 Σ log L_ii`.
pub fn log_det_from_factor(f: &CholeskyFactor) -> f64 {
    2.0 * f.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// KL(N(m1, c1) ‖ N(m2, c2)) in closed form.
pub fn mvn_kl(m1: &Vector, c1: &Matrix, m2: &Vector, c2: &Matrix) -> Result<f64> {
    mvn_kl_with_jitter(m1, c1, m2, c2, 0.0)
}

/// [`mvn_kl`] with a base jitter handed to both factorizations.
pub fn mvn_kl_with_jitter(
    m1: &Vector,
    c1: &Matrix,
    m2: &Vector,
    c2: &Matrix,
    base_jitter: f64,
) -> Result<f64> {
    let n = m1.len();
    if m2.len() != n || c1.nrows() != n || c2.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "KL operands: means {} / {}, covariances {} / {}",
            n,
            m2.len(),
            c1.nrows(),
            c2.nrows()
        )));
    }
    let f1 = cholesky(c1, base_jitter)?;
    let f2 = cholesky(c2, base_jitter)?;
    let diff = m1 - m2;
    let maha = diff.dot(&solve_vector(&f2, &diff)?);
    let mut c1_eff = c1.clone();
    for i in 0..n {
        c1_eff[(i, i)] += f1.jitter_applied;
    }
    let trace = solve_with_factor(&f2, &c1_eff)?.trace();
    let log_det_ratio = log_det_from_factor(&f2) - log_det_from_factor(&f1);
    Ok(0.5 * (maha + trace - n as f64 + log_det_ratio))
}

/// Draws `count` samples `m + L z`, z standard normal.
///
/// A zero covariance yields copies of `m`. Singular but nonzero PSD
/// covariances go through the jitter escalation of [`cholesky`].
pub fn mvn_sample(m: &Vector, c: &Matrix, rng: &mut Rng, count: usize) -> Result<Vec<Vector>> {
    let n = m.len();
    if c.nrows() != n || c.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "mean has {} entries, covariance is {}x{}",
            n,
            c.nrows(),
            c.ncols()
        )));
    }
    let lower = if c.iter().all(|v| *v == 0.0) {
        Matrix::zeros(n, n)
    } else {
        cholesky(c, 0.0)?.lower
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let z = Vector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
        out.push(m + &lower * z);
    }
    Ok(out)
}

/// Wasserstein-2 distance between two univariate Gaussians.
pub fn gauss_w2_1d(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    for s in [sigma1, sigma2] {
        if s < 0.0 {
            return Err(Error::NegativeScale(s));
        }
    }
    Ok(((mu1 - mu2).powi(2) + (sigma1 - sigma2).powi(2)).sqrt())
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
