//! Data splits, fitting, evaluation protocols and report assembly shared by
//! the commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use gfsvi_core::data::{
    gen_ood_pair, gen_sin, gen_two_moons, kfold, load_csv, CsvOptions, Dataset, SplitPlan,
    Standardization,
};
use gfsvi_core::eval::{
    accuracy, ece, entropy, mse, ood_stump_accuracy, pointwise_w2, posterior_function_samples,
    predict_gp, test_expected_ll_classification, test_expected_ll_regression, PredictiveSummary,
};
use gfsvi_core::gp_oracle::{gp_fit_dataset, gp_predict, GpPosterior};
use gfsvi_core::kernels::{fit_prior_minibatch, PriorSpec};
use gfsvi_core::network::Architecture;
use gfsvi_core::numerics::{derive_seed, mvn_sample, seeded_rng, Matrix};
use gfsvi_core::objective::LikelihoodParams;
use gfsvi_core::trainer::{
    train, MeasurementSampler, Method, Model, ModelPrior, TraceRow, TrainerConfig,
};
use gfsvi_core::variational::{Checkpoint, VariationalPosterior};
use serde::{Deserialize, Serialize};

use crate::config::{
    DatasetSpec, ExperimentConfig, GridSpec, LikelihoodConfig, MethodName, PriorConfig,
    SCHEMA_VERSION,
};
use crate::{CliError, CliResult};

/// Train, validation and test data of one run, standardized when configured.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub standardization: Option<Standardization>,
}

fn generate(spec: &DatasetSpec, n: usize, seed: u64) -> CliResult<Dataset> {
    let mut rng = seeded_rng(seed);
    Ok(match spec {
        DatasetSpec::Sin { noise, .. } => gen_sin(n, *noise, &mut rng)?,
        DatasetSpec::TwoMoons { noise, .. } => gen_two_moons(n, *noise, &mut rng)?,
        DatasetSpec::Csv { .. } => unreachable!("CSV data is loaded, not generated"),
    })
}

/// All rows available for cross-validation.
pub fn load_pool(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    match &cfg.dataset {
        DatasetSpec::Csv {
            path,
            target,
            categorical,
            task,
        } => {
            let options = CsvOptions {
                categorical: categorical.clone(),
                task: *task,
            };
            load_csv(path, target, &options).map_err(|e| CliError::from(e).context("dataset"))
        }
        DatasetSpec::Sin { n, .. } | DatasetSpec::TwoMoons { n, .. } => {
            generate(&cfg.dataset, *n, derive_seed(cfg.seed, "data-pool"))
        }
    }
}

fn finish(
    cfg: &ExperimentConfig,
    train: Dataset,
    val: Dataset,
    test: Dataset,
) -> CliResult<Splits> {
    if !cfg.standardize() {
        return Ok(Splits {
            train,
            val,
            test,
            standardization: None,
        });
    }
    let stats = Standardization::fit(&train)?;
    Ok(Splits {
        train: stats.apply(&train)?,
        val: stats.apply(&val)?,
        test: stats.apply(&test)?,
        standardization: Some(stats),
    })
}

/// Single train/validation/test split. Generators draw the three parts
/// independently; CSV data uses the first cross-validation fold.
pub fn holdout_splits(cfg: &ExperimentConfig) -> CliResult<Splits> {
    match &cfg.dataset {
        DatasetSpec::Sin {
            n,
            val_size,
            test_size,
            ..
        }
        | DatasetSpec::TwoMoons {
            n,
            val_size,
            test_size,
            ..
        } => {
            let val_n = val_size.unwrap_or((n / 5).max(10));
            let test_n = test_size.unwrap_or(*n);
            let train = generate(&cfg.dataset, *n, derive_seed(cfg.seed, "data-train"))?;
            let val = generate(&cfg.dataset, val_n, derive_seed(cfg.seed, "data-val"))?;
            let test = generate(&cfg.dataset, test_n, derive_seed(cfg.seed, "data-test"))?;
            finish(cfg, train, val, test)
        }
        DatasetSpec::Csv { .. } => {
            let pool = load_pool(cfg)?;
            fold_splits(cfg, &pool, 0)
        }
    }
}

fn split_plan(cfg: &ExperimentConfig) -> SplitPlan {
    SplitPlan {
        n_folds: cfg.cv.n_folds,
        val_fraction: cfg.cv.val_fraction,
        seed: derive_seed(cfg.seed, "splits"),
    }
}

pub fn fold_splits(cfg: &ExperimentConfig, pool: &Dataset, fold: usize) -> CliResult<Splits> {
    let folds = kfold(pool.len(), &split_plan(cfg))?;
    let f = folds
        .get(fold)
        .ok_or_else(|| CliError::Config(format!("fold {fold} out of range")))?;
    finish(
        cfg,
        pool.subset(&f.train),
        pool.subset(&f.val),
        pool.subset(&f.test),
    )
}

/// A fitted model: a variational network or the exact GP.
#[derive(Debug, Clone)]
pub enum Fitted {
    Network {
        method: Method,
        model: Model,
        trace: Vec<TraceRow>,
        summary: TrainSummary,
    },
    Gp {
        posterior: GpPosterior,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_val_loss: f64,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub steps_run: usize,
}

pub fn core_method(m: MethodName) -> Option<Method> {
    match m {
        MethodName::Gfsvi => Some(Method::Gfsvi),
        MethodName::Mfvi => Some(Method::Mfvi),
        MethodName::Tfsvi => Some(Method::Tfsvi),
        MethodName::Gp => None,
    }
}

pub fn likelihood_params(l: LikelihoodConfig) -> LikelihoodParams {
    match l {
        LikelihoodConfig::Gaussian { noise } => LikelihoodParams::gaussian(noise),
        LikelihoodConfig::Categorical { mc_samples } => LikelihoodParams::categorical(mc_samples),
    }
}

/// GP prior after optional marginal-likelihood fitting on `train`.
pub fn resolved_gp_prior(
    cfg: &ExperimentConfig,
    train: &Dataset,
    seed: u64,
) -> CliResult<Option<PriorSpec>> {
    let PriorConfig::Gp(prior) = &cfg.prior else {
        return Ok(None);
    };
    match &cfg.fit_prior {
        Some(fit) => {
            let mut rng = seeded_rng(derive_seed(seed, "prior-fit"));
            Ok(Some(fit_prior_minibatch(prior, train, fit, &mut rng)?))
        }
        None => Ok(Some(prior.clone())),
    }
}

pub fn measurement_sampler(
    cfg: &ExperimentConfig,
    train: &Dataset,
) -> CliResult<MeasurementSampler> {
    let m = &cfg.measurement;
    let default = MeasurementSampler::for_data(train, m.count)?;
    let lower = m.lower.clone().unwrap_or(default.lower);
    let upper = m.upper.clone().unwrap_or(default.upper);
    MeasurementSampler::new(lower, upper, m.count)
        .map_err(|e| CliError::from(e).context("measurement"))
}

/// Fits the configured method on `splits` with all randomness derived from
/// `seed`.
pub fn fit(cfg: &ExperimentConfig, splits: &Splits, seed: u64) -> CliResult<Fitted> {
    let gp_prior = resolved_gp_prior(cfg, &splits.train, seed)?;
    let Some(method) = core_method(cfg.method) else {
        let prior = gp_prior.expect("gp method has a gp prior");
        return Ok(Fitted::Gp {
            posterior: gp_fit_dataset(&prior, &splits.train, None)?,
        });
    };
    let arch = Architecture::new(
        splits.train.dim(),
        cfg.architecture.hidden.clone(),
        splits.train.output_dim(),
        cfg.architecture.activation,
    );
    arch.validate()?;
    let posterior =
        VariationalPosterior::initialize(&arch, &mut seeded_rng(derive_seed(seed, "init")));
    let prior = match (&cfg.prior, gp_prior) {
        (_, Some(p)) => ModelPrior::Function(p),
        (PriorConfig::Weight(w), None) => ModelPrior::Weight(*w),
        (PriorConfig::Gp(_), None) => unreachable!("gp priors always resolve"),
    };
    let model = Model {
        arch,
        posterior,
        prior,
        likelihood: likelihood_params(cfg.likelihood()),
    };
    let t = &cfg.training;
    let tcfg = TrainerConfig {
        batch_size: t.batch_size,
        steps: t.steps,
        learning_rate: t.learning_rate,
        early_stop_patience: t.early_stop_patience,
        check_every: t.check_every,
        learn_noise: t.learn_noise,
        seed: derive_seed(seed, "trainer"),
    };
    let sampler = measurement_sampler(cfg, &splits.train)?;
    let out = train(
        model,
        &splits.train,
        &splits.val,
        &tcfg,
        &sampler,
        &cfg.reg_kl,
        method,
    )?;
    Ok(Fitted::Network {
        method,
        model: out.model,
        trace: out.trace,
        summary: TrainSummary {
            initial_val_loss: out.initial_val_loss,
            best_step: out.best_step,
            best_val_loss: out.best_val_loss,
            steps_run: out.steps_run,
        },
    })
}

impl Fitted {
    pub fn predict(&self, xs: &Matrix, seed: u64) -> CliResult<PredictiveSummary> {
        match self {
            Fitted::Network { method, model, .. } => {
                Ok(model.predict(*method, xs, &mut seeded_rng(seed))?)
            }
            Fitted::Gp { posterior } => Ok(predict_gp(posterior, xs)?),
        }
    }

    /// `k` posterior function draws (first output) on `xs`, one per row.
    pub fn function_samples(&self, xs: &Matrix, k: usize, seed: u64) -> CliResult<Matrix> {
        let mut rng = seeded_rng(seed);
        match self {
            Fitted::Network { method, model, .. } => Ok(posterior_function_samples(
                &model.arch,
                &model.posterior,
                xs,
                k,
                method.linearized(),
                &mut rng,
            )?),
            Fitted::Gp { posterior } => {
                let marginal = gp_predict(posterior, xs)?;
                let draws = mvn_sample(&marginal.mean, &marginal.cov, &mut rng, k)?;
                Ok(Matrix::from_fn(k, xs.nrows(), |r, c| draws[r][c]))
            }
        }
    }
}

/// Serialized network model with what is needed to predict from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub method: MethodName,
    pub likelihood: LikelihoodConfig,
    pub model: Checkpoint,
}

impl ModelFile {
    pub fn from_fitted(fitted: &Fitted, cfg: &ExperimentConfig) -> Option<Self> {
        let Fitted::Network { model, .. } = fitted else {
            return None;
        };
        Some(Self {
            schema_version: SCHEMA_VERSION,
            method: cfg.method,
            likelihood: cfg.likelihood(),
            model: model.checkpoint(),
        })
    }

    /// Rebuilds a predictor; the prior is irrelevant for prediction.
    pub fn into_fitted(self) -> CliResult<Fitted> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "checkpoint schema_version {} unsupported",
                self.schema_version
            )));
        }
        let method = core_method(self.method)
            .ok_or_else(|| CliError::Config("checkpoint: the exact GP has no checkpoint".into()))?;
        self.model.architecture.validate()?;
        let posterior = self.model.posterior()?;
        let mut likelihood = likelihood_params(self.likelihood);
        if let Some(raw) = self.model.raw_noise {
            likelihood.raw_noise = raw;
        }
        let prior = ModelPrior::Weight(gfsvi_core::variational::WeightPrior { scale: 1.0 });
        let model = Model {
            arch: self.model.architecture,
            posterior,
            prior,
            likelihood,
        };
        Ok(Fitted::Network {
            method,
            model,
            trace: Vec::new(),
            summary: TrainSummary {
                initial_val_loss: f64::NAN,
                best_step: 0,
                best_val_loss: f64::NAN,
                steps_run: 0,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Regression,
    Classification,
    Ood,
    W2,
}

pub fn default_protocol(cfg: &ExperimentConfig) -> Protocol {
    if cfg.dataset.is_classification() {
        Protocol::Classification
    } else {
        Protocol::Regression
    }
}

pub type Metrics = BTreeMap<String, f64>;

/// Row-major grid: the first coordinate varies slowest.
pub fn grid_points(spec: &GridSpec) -> Matrix {
    let axes: Vec<Vec<f64>> = (0..spec.lower.len())
        .map(|d| {
            let n = spec.points[d];
            (0..n)
                .map(|i| {
                    spec.lower[d] + (spec.upper[d] - spec.lower[d]) * i as f64 / (n - 1) as f64
                })
                .collect()
        })
        .collect();
    let total: usize = spec.points.iter().product();
    let mut out = Matrix::zeros(total, axes.len());
    for r in 0..total {
        let mut rest = r;
        for d in (0..axes.len()).rev() {
            out[(r, d)] = axes[d][rest % spec.points[d]];
            rest /= spec.points[d];
        }
    }
    out
}

/// Metrics of `fitted` under `protocol`. `reference` is the exact GP the
/// W2 protocol compares against; `grid` defaults to the test inputs.
pub fn evaluate(
    fitted: &Fitted,
    protocol: Protocol,
    splits: &Splits,
    reference: Option<&GpPosterior>,
    grid: Option<&Matrix>,
    seed: u64,
) -> CliResult<Metrics> {
    let mut m = Metrics::new();
    let test = &splits.test;
    let classification = test.targets.as_labels().is_some();
    let predict_seed = derive_seed(seed, "predict");
    match protocol {
        Protocol::Regression => {
            let y = test.targets.as_regression().ok_or_else(|| {
                CliError::Config("protocol regression needs regression data".into())
            })?;
            let s = fitted.predict(&test.features, predict_seed)?;
            m.insert(
                "test_expected_ll".into(),
                test_expected_ll_regression(&s, y)?,
            );
            m.insert("mse".into(), mse(&s, y)?);
            if let Some(noise) = s.noise_std {
                m.insert("noise_std".into(), noise);
            }
        }
        Protocol::Classification => {
            let labels = test.targets.as_labels().ok_or_else(|| {
                CliError::Config("protocol classification needs labelled data".into())
            })?;
            let s = fitted.predict(&test.features, predict_seed)?;
            let probs = s
                .class_probs
                .as_ref()
                .expect("classification summaries carry probabilities");
            m.insert(
                "test_expected_ll".into(),
                test_expected_ll_classification(&s, labels)?,
            );
            m.insert("accuracy".into(), accuracy(probs, labels)?);
            m.insert("ece".into(), ece(probs, labels, 10)?);
            m.insert("mean_entropy".into(), entropy(probs).mean());
        }
        Protocol::Ood => {
            let (id, ood) = gen_ood_pair(test, &mut seeded_rng(derive_seed(seed, "ood")))?;
            let u_id = fitted.predict(&id.features, predict_seed)?.uncertainty();
            let u_ood = fitted.predict(&ood.features, predict_seed)?.uncertainty();
            let (threshold, acc) = ood_stump_accuracy(u_id.as_slice(), u_ood.as_slice())?;
            m.insert("ood_threshold".into(), threshold);
            m.insert("ood_accuracy".into(), acc);
        }
        Protocol::W2 => {
            let reference = reference.ok_or_else(|| {
                CliError::Config("protocol w2 requires a GP reference config".into())
            })?;
            if classification {
                return Err(CliError::Config("protocol w2 needs regression data".into()));
            }
            let xs = grid.unwrap_or(&test.features);
            let exact = gp_predict(reference, xs)?;
            let s = fitted.predict(xs, predict_seed)?;
            m.insert("w2".into(), pointwise_w2(&s, &exact)?);
        }
    }
    Ok(m)
}

/// Exact GP of a reference config on the training split of `splits`.
pub fn reference_gp(
    reference: &ExperimentConfig,
    splits: &Splits,
    seed: u64,
) -> CliResult<GpPosterior> {
    let prior = resolved_gp_prior(reference, &splits.train, seed)?
        .ok_or_else(|| CliError::Config("reference: needs a gp prior".into()))?;
    Ok(gp_fit_dataset(&prior, &splits.train, None)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation over folds divided by `√folds`; absent for
    /// a single fold.
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub dataset: String,
    pub method: MethodName,
    pub protocol: Protocol,
    pub folds: Vec<FoldReport>,
    pub aggregate: BTreeMap<String, Aggregate>,
}

pub fn aggregate(folds: &[FoldReport]) -> BTreeMap<String, Aggregate> {
    let mut out = BTreeMap::new();
    let Some(first) = folds.first() else {
        return out;
    };
    for key in first.metrics.keys() {
        let vals: Vec<f64> = folds
            .iter()
            .filter_map(|f| f.metrics.get(key).copied())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let se = (vals.len() > 1).then(|| {
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt() / n.sqrt()
        });
        out.insert(key.clone(), Aggregate { mean, se });
    }
    out
}

pub fn report(cfg: &ExperimentConfig, protocol: Protocol, folds: Vec<FoldReport>) -> Report {
    Report {
        schema_version: SCHEMA_VERSION,
        dataset: cfg.dataset.name(),
        method: cfg.method,
        protocol,
        aggregate: aggregate(&folds),
        folds,
    }
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("step,train_loss,val_loss\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{}", r.step, r.train_loss, r.val_loss);
    }
    s
}

/// Flat `dataset,method,fold,metric,value` table.
pub fn metrics_csv(report: &Report) -> String {
    let mut s = String::from("dataset,method,fold,metric,value\n");
    let method = serde_json::to_value(report.method)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    for f in &report.folds {
        for (k, v) in &f.metrics {
            let _ = writeln!(s, "{},{},{},{},{}", report.dataset, method, f.fold, k, v);
        }
    }
    for (k, a) in &report.aggregate {
        let _ = writeln!(s, "{},{},mean,{},{}", report.dataset, method, k, a.mean);
        if let Some(se) = a.se {
            let _ = writeln!(s, "{},{},se,{},{}", report.dataset, method, k, se);
        }
    }
    s
}

/// CSV of predictive summaries on `xs`: inputs, mean and epistemic std of
/// the first output, class probabilities and entropy for classifiers, then
/// `samples` function draws.
pub fn grid_csv(fitted: &Fitted, xs: &Matrix, samples: usize, seed: u64) -> CliResult<String> {
    let summary = fitted.predict(xs, derive_seed(seed, "grid-predict"))?;
    let draws = fitted.function_samples(xs, samples, derive_seed(seed, "grid-samples"))?;
    let d = xs.ncols();
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.push("mean".into());
    header.push("std".into());
    if let Some(p) = &summary.class_probs {
        header.extend((0..p.ncols()).map(|c| format!("prob_{c}")));
        header.push("entropy".into());
    }
    header.extend((1..=samples).map(|k| format!("sample_{k}")));
    let ent = summary.class_probs.as_ref().map(entropy);
    let mut s = header.join(",");
    s.push('\n');
    for i in 0..xs.nrows() {
        let mut row: Vec<String> = (0..d).map(|c| xs[(i, c)].to_string()).collect();
        row.push(summary.mean[(i, 0)].to_string());
        row.push(summary.epistemic_std[(i, 0)].to_string());
        if let (Some(p), Some(e)) = (&summary.class_probs, &ent) {
            row.extend((0..p.ncols()).map(|c| p[(i, c)].to_string()));
            row.push(e[i].to_string());
        }
        row.extend((0..samples).map(|k| draws[(k, i)].to_string()));
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}
