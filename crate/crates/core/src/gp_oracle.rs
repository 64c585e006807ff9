//! Exact Gaussian-process regression, the reference posterior.

use std::f64::consts::PI;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{fit_prior_minibatch, gram, gram_sym, FitConfig, PriorSpec};
use crate::numerics::{
    cholesky, log_det_from_factor, solve_vector, symmetrize, CholeskyFactor, GaussianMarginal,
    Matrix, Rng, Vector,
};

/// Largest training set the dense solver accepts.
pub const EXACT_GP_LIMIT: usize = 2000;

#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub prior: PriorSpec,
    pub train_x: Matrix,
    pub train_y: Vector,
    /// Factor of `K(X, X) + σ_n² I`.
    pub chol: CholeskyFactor,
    /// `(K + σ_n² I)⁻¹ (y − μ)`.
    pub alpha: Vector,
}

fn noisy_gram_factor(prior: &PriorSpec, xs: &Matrix) -> Result<CholeskyFactor> {
    let mut k = gram_sym(&prior.kernel, xs)?;
    let noise_var = prior.noise * prior.noise;
    for i in 0..k.nrows() {
        k[(i, i)] += noise_var;
    }
    cholesky(&k, 0.0)
}

fn check_inputs(xs: &Matrix, ys: &Vector) -> Result<()> {
    if xs.nrows() == 0 {
        return Err(Error::EmptyInput("GP training set"));
    }
    if xs.nrows() > EXACT_GP_LIMIT {
        return Err(Error::Infeasible {
            n: xs.nrows(),
            limit: EXACT_GP_LIMIT,
        });
    }
    if ys.len() != xs.nrows() {
        return Err(Error::DimensionMismatch {
            expected: xs.nrows(),
            got: ys.len(),
        });
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidParameter("non-finite GP target".into()));
    }
    Ok(())
}

pub fn gp_fit(prior: &PriorSpec, xs: &Matrix, ys: &Vector) -> Result<GpPosterior> {
    prior.validate()?;
    check_inputs(xs, ys)?;
    let chol = noisy_gram_factor(prior, xs)?;
    let alpha = solve_vector(&chol, &(ys - prior.mean_vector(ys.len())))?;
    Ok(GpPosterior {
        prior: prior.clone(),
        train_x: xs.clone(),
        train_y: ys.clone(),
        chol,
        alpha,
    })
}

/// Fits on a regression dataset, optionally tuning the hyperparameters by
/// mini-batch marginal likelihood first.
pub fn gp_fit_dataset(
    prior: &PriorSpec,
    data: &Dataset,
    tune: Option<(&FitConfig, &mut Rng)>,
) -> Result<GpPosterior> {
    let ys = data
        .targets
        .as_regression()
        .ok_or_else(|| Error::InvalidParameter("exact GP needs regression targets".into()))?;
    let prior = match tune {
        Some((cfg, rng)) => fit_prior_minibatch(prior, data, cfg, rng)?,
        None => prior.clone(),
    };
    gp_fit(&prior, &data.features, ys)
}

pub fn gp_predict(post: &GpPosterior, xs_test: &Matrix) -> Result<GaussianMarginal> {
    let cross = gram(&post.prior.kernel, &post.train_x, xs_test)?;
    let prior_cov = gram_sym(&post.prior.kernel, xs_test)?;
    let mean = post.prior.mean_vector(xs_test.nrows()) + cross.transpose() * &post.alpha;
    let v = post
        .chol
        .lower
        .solve_lower_triangular(&cross)
        .ok_or(Error::NotPositiveDefinite {
            max_jitter: post.chol.jitter_applied,
        })?;
    let cov = symmetrize(&(prior_cov - v.transpose() * v));
    Ok(GaussianMarginal { mean, cov })
}

pub fn gp_log_marginal(prior: &PriorSpec, xs: &Matrix, ys: &Vector) -> Result<f64> {
    check_inputs(xs, ys)?;
    let chol = noisy_gram_factor(prior, xs)?;
    let centered = ys - prior.mean_vector(ys.len());
    let alpha = solve_vector(&chol, &centered)?;
    let n = ys.len() as f64;
    Ok(-0.5 * centered.dot(&alpha) - 0.5 * log_det_from_factor(&chol) - 0.5 * n * (2.0 * PI).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelFamily, KernelSpec};
    use crate::numerics::Rng;
    use crate::numerics::{seeded_rng, standard_normal};
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn rbf(amplitude: f64, ell: f64, noise: f64) -> PriorSpec {
        PriorSpec::new(KernelSpec::new(KernelFamily::Rbf, amplitude, ell), noise)
    }

    fn points(n: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn single_point_interpolates() {
        let prior = rbf(1.0, 0.5, 0.0);
        let xs = Matrix::from_element(1, 1, 0.3);
        let post = gp_fit(&prior, &xs, &Vector::from_element(1, 1.7)).unwrap();
        let pred = gp_predict(&post, &xs).unwrap();
        assert!((pred.mean[0] - 1.7).abs() < 1e-12);
        assert!(pred.cov[(0, 0)] <= 1e-8);
    }

    #[test]
    fn matches_naive_inversion() {
        let mut rng = seeded_rng(0);
        let prior = rbf(1.3, 0.7, 0.2);
        let xs = points(5, &mut rng);
        let ys = Vector::from_fn(5, |_, _| standard_normal(&mut rng));
        let xt = points(3, &mut rng);
        let pred = gp_predict(&gp_fit(&prior, &xs, &ys).unwrap(), &xt).unwrap();

        let mut k = gram_sym(&prior.kernel, &xs).unwrap();
        k += Matrix::identity(5, 5) * 0.04;
        let kinv = k.try_inverse().unwrap();
        let ks = gram(&prior.kernel, &xt, &xs).unwrap();
        let mean = &ks * &kinv * &ys;
        let cov = gram_sym(&prior.kernel, &xt).unwrap() - &ks * &kinv * ks.transpose();
        assert!((pred.mean - mean).abs().max() < 1e-8);
        assert!((pred.cov - cov).abs().max() < 1e-8);
    }

    #[test]
    fn vanishing_amplitude_returns_prior_mean() {
        let mut prior = rbf(1e-12, 0.5, 0.1);
        prior.mean = 2.5;
        let mut rng = seeded_rng(1);
        let xs = points(6, &mut rng);
        let ys = Vector::from_fn(6, |_, _| 10.0 * standard_normal(&mut rng));
        let pred = gp_predict(&gp_fit(&prior, &xs, &ys).unwrap(), &points(4, &mut rng)).unwrap();
        assert!(pred.mean.iter().all(|m| (m - 2.5).abs() < 1e-9));
    }

    #[test]
    fn far_points_revert_to_prior() {
        let prior = rbf(1.5, 0.3, 0.1);
        let mut rng = seeded_rng(2);
        let xs = points(8, &mut rng);
        let ys = Vector::from_fn(8, |_, _| standard_normal(&mut rng));
        let far = Matrix::from_element(1, 1, 2.0 + 20.0 * 0.3);
        let pred = gp_predict(&gp_fit(&prior, &xs, &ys).unwrap(), &far).unwrap();
        assert!(pred.mean[0].abs() < 1e-6);
        assert!((pred.cov[(0, 0)] - 1.5 * 1.5).abs() < 1e-6);
    }

    #[test]
    fn noiseless_variance_vanishes_at_training_points_and_shrinks_elsewhere() {
        let prior = rbf(1.0, 0.5, 0.0);
        let mut rng = seeded_rng(3);
        let xs = points(5, &mut rng);
        let ys = Vector::from_fn(5, |_, _| standard_normal(&mut rng));
        let post = gp_fit(&prior, &xs, &ys).unwrap();
        let at = gp_predict(&post, &xs).unwrap();
        assert!(at.cov.diagonal().iter().all(|v| *v <= 1e-8));
        assert!((at.mean - &ys).abs().max() < 1e-6);
        let grid = Matrix::from_fn(50, 1, |i, _| -3.0 + 0.12 * i as f64);
        let pred = gp_predict(&post, &grid).unwrap();
        assert!(pred.cov.diagonal().iter().all(|v| *v <= 1.0 + 1e-12));
    }

    #[test]
    fn log_marginal_examples() {
        let prior = rbf(1.0, 1.0, 0.0);
        let lml =
            gp_log_marginal(&prior, &Matrix::from_element(1, 1, 0.0), &Vector::zeros(1)).unwrap();
        assert!((lml + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);

        let prior = rbf(0.8, 0.6, 0.3);
        let mut rng = seeded_rng(4);
        let xs = points(4, &mut rng);
        let ys = Vector::from_fn(4, |_, _| standard_normal(&mut rng));
        let mut c = gram_sym(&prior.kernel, &xs).unwrap();
        c += Matrix::identity(4, 4) * 0.09;
        let dense = -0.5 * ys.dot(&(c.clone().try_inverse().unwrap() * &ys))
            - 0.5 * c.determinant().ln()
            - 2.0 * (2.0 * PI).ln();
        assert!((gp_log_marginal(&prior, &xs, &ys).unwrap() - dense).abs() < 1e-10);

        let dup = Matrix::from_row_slice(2, 1, &[0.5, 0.5]);
        let noisy = rbf(1.0, 1.0, 0.1);
        assert!(
            gp_log_marginal(&noisy, &dup, &Vector::from_vec(vec![0.1, 0.2]))
                .unwrap()
                .is_finite()
        );
    }

    #[test]
    fn infeasible_beyond_limit() {
        let xs = Matrix::zeros(EXACT_GP_LIMIT + 1, 1);
        let ys = Vector::zeros(EXACT_GP_LIMIT + 1);
        assert!(matches!(
            gp_fit(&rbf(1.0, 1.0, 0.1), &xs, &ys),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn sequential_conditioning_matches_joint() {
        let prior = rbf(1.1, 0.4, 0.15);
        let mut rng = seeded_rng(5);
        let xs = points(7, &mut rng);
        let ys = Vector::from_fn(7, |_, _| standard_normal(&mut rng));
        let xt = points(4, &mut rng);
        let joint = gp_predict(&gp_fit(&prior, &xs, &ys).unwrap(), &xt).unwrap();

        let all = Matrix::from_fn(
            11,
            1,
            |i, _| if i < 7 { xs[(i, 0)] } else { xt[(i - 7, 0)] },
        );
        let mut cov = gram_sym(&prior.kernel, &all).unwrap();
        let mut mean = Vector::zeros(11);
        for i in 0..7 {
            let denom = cov[(i, i)] + 0.15 * 0.15;
            let col = cov.column(i).into_owned();
            mean += &col * ((ys[i] - mean[i]) / denom);
            cov -= &col * col.transpose() / denom;
        }
        assert!((mean.rows(7, 4) - &joint.mean).abs().max() < 1e-7);
        assert!((cov.view((7, 7), (4, 4)) - &joint.cov).abs().max() < 1e-7);
    }

    proptest! {
        #[test]
        fn predictive_covariance_is_psd(seed in any::<u64>(), n in 1usize..15, ell in 0.1f64..2.0) {
            let mut rng = seeded_rng(seed);
            let prior = rbf(1.0, ell, 0.05);
            let xs = points(n, &mut rng);
            let ys = Vector::from_fn(n, |_, _| standard_normal(&mut rng));
            let pred = gp_predict(&gp_fit(&prior, &xs, &ys).unwrap(), &points(10, &mut rng)).unwrap();
            prop_assert!((pred.cov.clone() - pred.cov.transpose()).abs().max() == 0.0);
            prop_assert!(SymmetricEigen::new(pred.cov).eigenvalues.min() >= -1e-8);
        }
    }
}
