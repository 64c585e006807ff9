//! The mini-batch optimization loop: measurement-point sampling, Adam
//! updates and early stopping on a validation score.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    predict_linearized, predict_sampled, test_expected_ll_classification,
    test_expected_ll_regression, PredictiveSummary, CLASSIFICATION_SAMPLES,
};
use crate::kernels::PriorSpec;
use crate::network::Architecture;
use crate::numerics::{derive_seed, seeded_rng, Matrix, Rng};
use crate::objective::{
    check_likelihood, gfsvi_loss_with_grad, mfvi_loss_with_grad, tfsvi_loss_with_grad, Gradient,
    LikelihoodKind, LikelihoodParams, LossTerms, RegKlConfig,
};
use crate::optim::Adam;
use crate::variational::{Checkpoint, VariationalPosterior, WeightPrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    UniformBox,
}

/// `count` i.i.d. uniform draws from an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSampler {
    #[serde(default)]
    pub kind: SamplerKind,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub count: usize,
}

impl MeasurementSampler {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, count: usize) -> Result<Self> {
        let s = Self {
            kind: SamplerKind::UniformBox,
            lower,
            upper,
            count,
        };
        s.validate()?;
        Ok(s)
    }

    /// Box `[min − Δ/2, max + Δ/2]` per feature, `Δ = max − min`.
    pub fn for_data(data: &Dataset, count: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        let (lower, upper) = data
            .feature_range()
            .into_iter()
            .map(|(lo, hi)| {
                let half = if hi > lo { 0.5 * (hi - lo) } else { 0.5 };
                (lo - half, hi + half)
            })
            .unzip();
        Self::new(lower, upper, count)
    }

    pub fn with_count(&self, count: usize) -> Self {
        Self {
            count,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidParameter(
                "measurement count must be >= 1".into(),
            ));
        }
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "sampler box has {} lower and {} upper bounds",
                self.lower.len(),
                self.upper.len()
            )));
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite())
        {
            return Err(Error::InvalidParameter(
                "sampler box needs finite lower < upper".into(),
            ));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Matrix> {
        self.validate()?;
        let d = self.dim();
        let mut out = Matrix::zeros(self.count, d);
        for i in 0..self.count {
            for c in 0..d {
                out[(i, c)] = rng.random_range(self.lower[c]..self.upper[c]);
            }
        }
        Ok(out)
    }
}

pub fn sample_measurement_points(s: &MeasurementSampler, rng: &mut Rng) -> Result<Matrix> {
    s.sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gfsvi,
    Mfvi,
    Tfsvi,
}

/// Prior of a variational model: a GP over functions or a Gaussian over
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelPrior {
    Function(PriorSpec),
    Weight(WeightPrior),
}

impl Method {
    pub fn check_prior(self, prior: &ModelPrior) -> Result<()> {
        match (self, prior) {
            (Method::Gfsvi, ModelPrior::Function(_))
            | (Method::Mfvi | Method::Tfsvi, ModelPrior::Weight(_)) => Ok(()),
            _ => Err(Error::InvalidParameter(format!(
                "{self:?} is incompatible with the given prior"
            ))),
        }
    }

    /// Whether predictions use the linearized network.
    pub fn linearized(self) -> bool {
        !matches!(self, Method::Mfvi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub posterior: VariationalPosterior,
    pub prior: ModelPrior,
    pub likelihood: LikelihoodParams,
}

impl Model {
    pub fn checkpoint(&self) -> Checkpoint {
        let noise =
            (self.likelihood.kind == LikelihoodKind::Gaussian).then_some(self.likelihood.raw_noise);
        Checkpoint::new(&self.arch, &self.posterior, noise)
    }

    /// Predictive summary: linearized for function-space methods, sampled
    /// through the nonlinear network for MFVI.
    pub fn predict(&self, method: Method, xs: &Matrix, rng: &mut Rng) -> Result<PredictiveSummary> {
        if method.linearized() {
            predict_linearized(
                &self.arch,
                &self.posterior,
                &self.likelihood,
                xs,
                CLASSIFICATION_SAMPLES,
                rng,
            )
        } else {
            predict_sampled(
                &self.arch,
                &self.posterior,
                &self.likelihood,
                xs,
                CLASSIFICATION_SAMPLES,
                rng,
            )
        }
    }

    /// Mean per-point expected log-likelihood on `data`.
    pub fn score(&self, method: Method, data: &Dataset, rng: &mut Rng) -> Result<f64> {
        let summary = self.predict(method, &data.features, rng)?;
        match self.likelihood.kind {
            LikelihoodKind::Gaussian => {
                test_expected_ll_regression(&summary, data.targets.as_regression().unwrap())
            }
            LikelihoodKind::Categorical => {
                test_expected_ll_classification(&summary, data.targets.as_labels().unwrap())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Validation checks without improvement before stopping.
    pub early_stop_patience: usize,
    /// Steps between validation checks.
    pub check_every: usize,
    /// Learn the Gaussian observation noise alongside the posterior.
    pub learn_noise: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            steps: 3000,
            learning_rate: 5e-3,
            early_stop_patience: 10,
            check_every: 50,
            learn_noise: true,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.check_every == 0 {
            return Err(Error::InvalidParameter(
                "batch_size and check_every must be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Mean minibatch loss over the steps since the previous check.
    pub train_loss: f64,
    /// Negative mean expected log-likelihood on the validation split.
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model at the best validation check (step 0 counts).
    pub model: Model,
    pub trace: Vec<TraceRow>,
    pub initial_val_loss: f64,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub steps_run: usize,
    /// Every minibatch loss, in order.
    pub step_losses: Vec<f64>,
}

/// Epoch-wise shuffled minibatches.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    size: usize,
}

impl Batcher {
    fn new(n: usize, size: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            size: size.min(n),
        }
    }

    fn next(&mut self, rng: &mut Rng) -> Vec<usize> {
        if self.size == self.order.len() {
            return self.order.clone();
        }
        if self.cursor + self.size > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.size].to_vec();
        self.cursor += self.size;
        out
    }
}

fn grad_to_vec(g: &Gradient, with_noise: bool) -> Vec<f64> {
    let mut v: Vec<f64> = g.mean.iter().chain(g.raw_scale.iter()).copied().collect();
    if with_noise {
        v.push(g.raw_noise);
    }
    v
}

fn model_params(model: &Model, with_noise: bool) -> Vec<f64> {
    let mut v = model.posterior.to_params();
    if with_noise {
        v.push(model.likelihood.raw_noise);
    }
    v
}

fn set_model_params(model: &mut Model, params: &[f64], with_noise: bool) {
    model.posterior.set_params(params);
    if with_noise {
        model.likelihood.raw_noise = params[2 * model.posterior.dim()];
    }
}

/// One loss and gradient evaluation for `method`.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    method: Method,
    model: &Model,
    batch: &Dataset,
    measurement_points: Option<&Matrix>,
    cfg: &RegKlConfig,
    n_total: usize,
    rng: &mut Rng,
) -> Result<(LossTerms, Gradient)> {
    let (arch, q, lik) = (&model.arch, &model.posterior, &model.likelihood);
    let points = || measurement_points.ok_or(Error::EmptyInput("measurement points"));
    match (method, &model.prior) {
        (Method::Gfsvi, ModelPrior::Function(p)) => {
            gfsvi_loss_with_grad(arch, q, p, batch, points()?, lik, cfg, n_total, rng)
        }
        (Method::Tfsvi, ModelPrior::Weight(p)) => {
            tfsvi_loss_with_grad(arch, q, p, batch, points()?, lik, cfg, n_total, rng)
        }
        (Method::Mfvi, ModelPrior::Weight(p)) => {
            mfvi_loss_with_grad(arch, q, p, batch, lik, n_total, rng)
        }
        _ => Err(Error::InvalidParameter(format!(
            "{method:?} is incompatible with the given prior"
        ))),
    }
}

/// Runs the optimization loop and returns the best-validation checkpoint.
///
/// Measurement points are redrawn every step. The validation loss uses a
/// fixed generator, so it is a deterministic function of the parameters.
/// A factorization whose jitter cap is not finite saw overflowed entries.
fn overflow_as_non_finite(e: Error, step: usize) -> Error {
    match e {
        Error::NotPositiveDefinite { max_jitter } if !max_jitter.is_finite() => {
            Error::NonFiniteLoss { step }
        }
        e => e,
    }
}

pub fn train(
    model: Model,
    train: &Dataset,
    val: &Dataset,
    tcfg: &TrainerConfig,
    sampler: &MeasurementSampler,
    cfg: &RegKlConfig,
    method: Method,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    cfg.validate()?;
    model.arch.validate()?;
    model.likelihood.validate()?;
    method.check_prior(&model.prior)?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("validation split"));
    }
    check_likelihood(&model.likelihood, train)?;
    check_likelihood(&model.likelihood, val)?;
    if method != Method::Mfvi {
        sampler.validate()?;
        if sampler.dim() != train.dim() {
            return Err(Error::DimensionMismatch {
                expected: train.dim(),
                got: sampler.dim(),
            });
        }
    }

    let with_noise = tcfg.learn_noise && model.likelihood.kind == LikelihoodKind::Gaussian;
    let mut batch_rng = seeded_rng(derive_seed(tcfg.seed, "batches"));
    let mut point_rng = seeded_rng(derive_seed(tcfg.seed, "measurement"));
    let mut mc_rng = seeded_rng(derive_seed(tcfg.seed, "loss-noise"));
    let val_seed = derive_seed(tcfg.seed, "validation");
    let val_loss =
        |m: &Model| -> Result<f64> { Ok(-m.score(method, val, &mut seeded_rng(val_seed))?) };

    let mut current = model;
    let mut params = model_params(&current, with_noise);
    let mut adam = Adam::new(params.len(), tcfg.learning_rate);
    let mut batcher = Batcher::new(train.len(), tcfg.batch_size);

    let initial_val_loss = val_loss(&current)?;
    let mut best = (current.clone(), 0usize, initial_val_loss);
    let mut trace = Vec::new();
    let mut step_losses = Vec::with_capacity(tcfg.steps);
    let mut window = 0.0;
    let mut window_len = 0usize;
    let mut bad_checks = 0usize;
    let mut steps_run = 0;

    for step in 0..tcfg.steps {
        let batch = train.subset(&batcher.next(&mut batch_rng));
        let points = if method == Method::Mfvi {
            None
        } else {
            Some(sampler.sample(&mut point_rng)?)
        };
        let (terms, grad) = loss_and_grad(
            method,
            &current,
            &batch,
            points.as_ref(),
            cfg,
            train.len(),
            &mut mc_rng,
        )
        .map_err(|e| overflow_as_non_finite(e, step))?;
        let g = grad_to_vec(&grad, with_noise);
        if !terms.value.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        step_losses.push(terms.value);
        window += terms.value;
        window_len += 1;
        adam.step(&mut params, &g);
        set_model_params(&mut current, &params, with_noise);
        steps_run = step + 1;

        if steps_run % tcfg.check_every == 0 || steps_run == tcfg.steps {
            let v = val_loss(&current).map_err(|e| overflow_as_non_finite(e, step))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            trace.push(TraceRow {
                step: steps_run,
                train_loss: window / window_len as f64,
                val_loss: v,
            });
            window = 0.0;
            window_len = 0;
            if v < best.2 {
                best = (current.clone(), steps_run, v);
                bad_checks = 0;
            } else {
                bad_checks += 1;
                if bad_checks >= tcfg.early_stop_patience {
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        model: best.0,
        trace,
        initial_val_loss,
        best_step: best.1,
        best_val_loss: best.2,
        steps_run,
        step_losses,
    })
}
