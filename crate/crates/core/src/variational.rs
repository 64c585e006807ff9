//! Mean-field Gaussian posterior over network weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Architecture;
use crate::numerics::{sigmoid, softplus, softplus_inverse, standard_normal, Rng, Vector};

/// `q(w) = N(m, diag(σ²))` with `σ = softplus(raw_scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub mean: Vector,
    pub raw_scale: Vector,
}

/// Initial posterior scale relative to the Glorot limit of each layer.
pub const INIT_SCALE_FACTOR: f64 = 1e-3;

impl VariationalPosterior {
    pub fn new(mean: Vector, raw_scale: Vector) -> Result<Self> {
        if mean.len() != raw_scale.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: raw_scale.len(),
            });
        }
        Ok(Self { mean, raw_scale })
    }

    pub fn from_scale(mean: Vector, scale: &Vector) -> Self {
        let raw_scale = scale.map(softplus_inverse);
        Self { mean, raw_scale }
    }

    /// Glorot-initialized mean with `σ_i = 1e-3 · limit_i`.
    pub fn initialize(arch: &Architecture, rng: &mut Rng) -> Self {
        let mean = arch.glorot_init(rng);
        let scale = Vector::from_iterator(
            mean.len(),
            arch.glorot_limits()
                .into_iter()
                .map(|l| INIT_SCALE_FACTOR * l),
        );
        Self::from_scale(mean, &scale)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn scale(&self) -> Vector {
        self.raw_scale.map(softplus)
    }

    /// Diagonal of `S`.
    pub fn variance(&self) -> Vector {
        self.raw_scale.map(|r| softplus(r).powi(2))
    }

    /// `dσ/draw`, used to chain scale gradients to the raw parameters.
    pub fn scale_slope(&self) -> Vector {
        self.raw_scale.map(sigmoid)
    }

    /// One reparameterized draw `w = m + σ ⊙ z`, returned with its `z`.
    pub fn sample_with_noise(&self, rng: &mut Rng) -> (Vector, Vector) {
        let z = Vector::from_iterator(self.dim(), (0..self.dim()).map(|_| standard_normal(rng)));
        let w = &self.mean + self.scale().component_mul(&z);
        (w, z)
    }

    /// Flat parameter vector `[m, raw_scale]`.
    pub fn to_params(&self) -> Vec<f64> {
        self.mean
            .iter()
            .chain(self.raw_scale.iter())
            .copied()
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let p = self.dim();
        self.mean.copy_from_slice(&params[..p]);
        self.raw_scale.copy_from_slice(&params[p..2 * p]);
    }
}

/// `count` independent draws from `q`.
pub fn sample_weights(q: &VariationalPosterior, rng: &mut Rng, count: usize) -> Vec<Vector> {
    (0..count).map(|_| q.sample_with_noise(rng).0).collect()
}

/// Isotropic zero-mean weight prior `N(0, σ_p² I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightPrior {
    pub scale: f64,
}

impl WeightPrior {
    pub fn new(scale: f64) -> Result<Self> {
        let p = Self { scale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weight prior scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// `KL(q ‖ N(0, σ_p² I))` in closed form.
pub fn weight_kl(q: &VariationalPosterior, prior: &WeightPrior) -> f64 {
    weight_kl_with_grad(q, prior).0
}

/// KL with its gradient with respect to `m` and `raw_scale`.
pub fn weight_kl_with_grad(q: &VariationalPosterior, prior: &WeightPrior) -> (f64, Vector, Vector) {
    let sp2 = prior.scale * prior.scale;
    let p = q.dim();
    let mut kl = 0.0;
    let mut dm = Vector::zeros(p);
    let mut draw = Vector::zeros(p);
    for i in 0..p {
        let s = softplus(q.raw_scale[i]);
        let m = q.mean[i];
        kl += (prior.scale / s).ln() + (s * s + m * m) / (2.0 * sp2) - 0.5;
        dm[i] = m / sp2;
        draw[i] = (-1.0 / s + s / sp2) * sigmoid(q.raw_scale[i]);
    }
    (kl, dm, draw)
}

/// Serialized posterior together with the architecture it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub mean: Vec<f64>,
    pub raw_scale: Vec<f64>,
    /// Raw Gaussian observation noise, when the likelihood has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_noise: Option<f64>,
}

impl Checkpoint {
    pub fn new(
        architecture: &Architecture,
        q: &VariationalPosterior,
        raw_noise: Option<f64>,
    ) -> Self {
        Self {
            architecture: architecture.clone(),
            mean: q.mean.iter().copied().collect(),
            raw_scale: q.raw_scale.iter().copied().collect(),
            raw_noise,
        }
    }

    pub fn posterior(&self) -> Result<VariationalPosterior> {
        let q = VariationalPosterior::new(
            Vector::from_vec(self.mean.clone()),
            Vector::from_vec(self.raw_scale.clone()),
        )?;
        let p = self.architecture.n_params();
        if q.dim() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: q.dim(),
            });
        }
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;

    fn posterior(means: &[f64], scales: &[f64]) -> VariationalPosterior {
        VariationalPosterior::from_scale(
            Vector::from_row_slice(means),
            &Vector::from_row_slice(scales),
        )
    }

    #[test]
    fn vanishing_scale_samples_the_mean() {
        let q = VariationalPosterior::new(
            Vector::from_vec(vec![1.0, -2.0]),
            Vector::from_element(2, -800.0),
        )
        .unwrap();
        for w in sample_weights(&q, &mut seeded_rng(0), 5) {
            assert_eq!(w, q.mean);
        }
    }

    #[test]
    fn sample_variance_matches_scale() {
        let q = posterior(&[0.0, 1.0, -1.0, 2.0, 0.5], &[0.1, 0.5, 1.0, 2.0, 3.0]);
        let draws = sample_weights(&q, &mut seeded_rng(1), 100_000);
        let n = draws.len() as f64;
        let s = q.scale();
        for i in 0..5 {
            let mean = draws.iter().map(|w| w[i]).sum::<f64>() / n;
            let var = draws.iter().map(|w| (w[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var / (s[i] * s[i]) - 1.0).abs() < 0.05, "coordinate {i}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let q = posterior(&[0.0, 1.0], &[0.3, 0.2]);
        assert_eq!(
            sample_weights(&q, &mut seeded_rng(4), 3),
            sample_weights(&q, &mut seeded_rng(4), 3)
        );
    }

    #[test]
    fn kl_examples() {
        let prior = WeightPrior::new(1.0).unwrap();
        assert!(weight_kl(&posterior(&[0.0, 0.0], &[1.0, 1.0]), &prior).abs() < 1e-12);
        assert!((weight_kl(&posterior(&[1.0], &[1.0]), &prior) - 0.5).abs() < 1e-12);
        let expected = 2.0 - 0.5 - 2f64.ln();
        assert!((weight_kl(&posterior(&[0.0], &[2.0]), &prior) - expected).abs() < 1e-12);
        let wide = WeightPrior::new(0.3).unwrap();
        assert!(weight_kl(&posterior(&[0.0; 4], &[0.3; 4]), &wide).abs() < 1e-12);
        assert!(WeightPrior::new(0.0).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = posterior(&[0.4, -0.3, 1.1], &[0.5, 0.9, 1.4]);
        let prior = WeightPrior::new(0.8).unwrap();
        let s = q.scale();
        let log_normal = |x: f64, m: f64, sd: f64| {
            -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * ((x - m) / sd).powi(2)
        };
        let draws = sample_weights(&q, &mut seeded_rng(2), 100_000);
        let terms: Vec<f64> = draws
            .iter()
            .map(|w| {
                (0..3)
                    .map(|i| log_normal(w[i], q.mean[i], s[i]) - log_normal(w[i], 0.0, prior.scale))
                    .sum()
            })
            .collect();
        let n = terms.len() as f64;
        let mean = terms.iter().sum::<f64>() / n;
        let sd = (terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let exact = weight_kl(&q, &prior);
        assert!(
            (mean - exact).abs() < 3.0 * sd / n.sqrt(),
            "{mean} vs {exact}"
        );
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let q = posterior(&[0.4, -0.3, 1.1, 0.0], &[0.05, 0.9, 1.4, 0.3]);
        let prior = WeightPrior::new(0.7).unwrap();
        let (_, dm, draw) = weight_kl_with_grad(&q, &prior);
        let params = q.to_params();
        let h = 1e-6;
        for j in 0..params.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p[j] += delta;
                let mut qq = q.clone();
                qq.set_params(&p);
                weight_kl(&qq, &prior)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let exact = if j < 4 { dm[j] } else { draw[j - 4] };
            assert!(
                (fd - exact).abs() <= 1e-6 * exact.abs().max(1.0),
                "{j}: {fd} vs {exact}"
            );
        }
    }

    #[test]
    fn initialization_uses_small_scales() {
        let arch = Architecture::new(1, vec![30, 30], 1, Activation::Tanh);
        let q = VariationalPosterior::initialize(&arch, &mut seeded_rng(3));
        let limits = arch.glorot_limits();
        for (s, l) in q.scale().iter().zip(&limits) {
            assert!((s / (1e-3 * l) - 1.0).abs() < 1e-9);
        }
        for (m, l) in q.mean.iter().zip(&limits) {
            assert!(m.abs() <= *l);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = Architecture::new(2, vec![3], 1, Activation::Relu);
        let q = VariationalPosterior::initialize(&arch, &mut seeded_rng(5));
        let ck = Checkpoint::new(&arch, &q, Some(-1.5));
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.posterior().unwrap(), q);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            m in prop::collection::vec(-3.0f64..3.0, 1..6),
            s in prop::collection::vec(0.01f64..3.0, 6),
            sp in 0.05f64..3.0,
        ) {
            let q = posterior(&m, &s[..m.len()]);
            prop_assert!(weight_kl(&q, &WeightPrior::new(sp).unwrap()) >= -1e-12);
        }
    }
}
