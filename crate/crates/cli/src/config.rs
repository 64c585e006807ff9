//! Versioned JSON experiment configs. Unknown keys are rejected and every
//! default is materialized when a config is resolved.

use std::path::{Path, PathBuf};

use gfsvi_core::data::Task;
use gfsvi_core::kernels::{FitConfig, PriorSpec};
use gfsvi_core::network::Activation;
use gfsvi_core::objective::RegKlConfig;
use gfsvi_core::variational::WeightPrior;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Gfsvi,
    Mfvi,
    Tfsvi,
    Gp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `sin(2πx) + ε` on two bands; validation and test are independent draws.
    Sin {
        n: usize,
        noise: f64,
        #[serde(default)]
        val_size: Option<usize>,
        #[serde(default)]
        test_size: Option<usize>,
    },
    TwoMoons {
        n: usize,
        noise: f64,
        #[serde(default)]
        val_size: Option<usize>,
        #[serde(default)]
        test_size: Option<usize>,
    },
    /// Tabular data; relative paths resolve against the config's directory.
    Csv {
        path: PathBuf,
        target: String,
        #[serde(default)]
        categorical: Vec<String>,
        #[serde(default)]
        task: Task,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Sin { .. } => "sin".into(),
            DatasetSpec::TwoMoons { .. } => "two_moons".into(),
            DatasetSpec::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }

    pub fn is_classification(&self) -> bool {
        match self {
            DatasetSpec::Sin { .. } => false,
            DatasetSpec::TwoMoons { .. } => true,
            DatasetSpec::Csv { task, .. } => *task == Task::Classification,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            hidden: vec![50, 50],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorConfig {
    /// GP prior over functions.
    Gp(PriorSpec),
    /// Isotropic Gaussian prior over weights.
    Weight(WeightPrior),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LikelihoodConfig {
    Gaussian {
        /// Initial observation noise `σ_y`.
        noise: f64,
    },
    Categorical {
        /// Monte-Carlo logit draws per training step.
        mc_samples: usize,
    },
}

/// Measurement distribution: uniform over a box. Missing bounds default to
/// the training feature range widened by half its width on each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementConfig {
    #[serde(default = "default_measurement_count")]
    pub count: usize,
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
}

fn default_measurement_count() -> usize {
    100
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self {
            count: default_measurement_count(),
            lower: None,
            upper: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub early_stop_patience: usize,
    pub check_every: usize,
    pub learn_noise: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let d = gfsvi_core::trainer::TrainerConfig::default();
        Self {
            batch_size: d.batch_size,
            steps: d.steps,
            learning_rate: d.learning_rate,
            early_stop_patience: d.early_stop_patience,
            check_every: d.check_every,
            learn_noise: d.learn_noise,
        }
    }
}

/// Evaluation grid for posterior summaries: per-dimension bounds and counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
    #[serde(default)]
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub n_folds: usize,
    pub val_fraction: f64,
    /// Standardize features and regression targets with training-split
    /// statistics. Defaults to true for CSV data and false for generators.
    pub standardize: Option<bool>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            n_folds: 5,
            val_fraction: 0.1,
            standardize: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub method: MethodName,
    #[serde(default)]
    pub architecture: NetworkSpec,
    pub prior: PriorConfig,
    /// When present, GP hyperparameters are fitted on the training split
    /// before use.
    #[serde(default)]
    pub fit_prior: Option<FitConfig>,
    #[serde(default)]
    pub likelihood: Option<LikelihoodConfig>,
    #[serde(default)]
    pub measurement: MeasurementConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub reg_kl: RegKlConfig,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Checks cross-field constraints and fills every default.
    pub fn resolve(mut self, base_dir: &Path) -> CliResult<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        match (self.method, &self.prior) {
            (MethodName::Gfsvi | MethodName::Gp, PriorConfig::Gp(p)) => p.validate()?,
            (MethodName::Mfvi | MethodName::Tfsvi, PriorConfig::Weight(p)) => p.validate()?,
            (m, _) => {
                return Err(CliError::Config(format!(
                    "prior: method {m:?} needs a {} prior",
                    match m {
                        MethodName::Gfsvi | MethodName::Gp => "gp",
                        _ => "weight",
                    }
                )))
            }
        }
        if self.fit_prior.is_some() && !matches!(self.prior, PriorConfig::Gp(_)) {
            return Err(CliError::Config(
                "fit_prior: only GP priors can be fitted".into(),
            ));
        }
        if let DatasetSpec::Csv { path, .. } = &mut self.dataset {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
            *path = std::fs::canonicalize(&*path)
                .map_err(|e| CliError::Config(format!("dataset.path: {}: {e}", path.display())))?;
        }
        let classification = self.dataset.is_classification();
        let likelihood = self.likelihood.unwrap_or(if classification {
            LikelihoodConfig::Categorical { mc_samples: 10 }
        } else {
            LikelihoodConfig::Gaussian { noise: 0.1 }
        });
        match likelihood {
            LikelihoodConfig::Gaussian { noise } if classification || !(noise > 0.0) => {
                return Err(CliError::Config(
                    "likelihood: gaussian needs regression data and noise > 0".into(),
                ))
            }
            LikelihoodConfig::Categorical { mc_samples } if !classification || mc_samples == 0 => {
                return Err(CliError::Config(
                    "likelihood: categorical needs classification data and mc_samples >= 1".into(),
                ))
            }
            _ => {}
        }
        if classification && self.method == MethodName::Gp {
            return Err(CliError::Config(
                "method: the exact GP supports regression only".into(),
            ));
        }
        self.likelihood = Some(likelihood);
        if self.cv.standardize.is_none() {
            self.cv.standardize = Some(matches!(self.dataset, DatasetSpec::Csv { .. }));
        }
        if let Some(g) = &self.grid {
            let d = g.lower.len();
            if d == 0
                || d > 2
                || g.upper.len() != d
                || g.points.len() != d
                || g.points.iter().any(|&p| p < 2)
            {
                return Err(CliError::Config(
                    "grid: lower, upper and points need 1 or 2 matching entries with at least 2 points".into(),
                ));
            }
        }
        self.reg_kl.validate()?;
        Ok(self)
    }

    pub fn likelihood(&self) -> LikelihoodConfig {
        self.likelihood.expect("config resolved")
    }

    pub fn standardize(&self) -> bool {
        self.cv.standardize.expect("config resolved")
    }
}

/// Config of the KL blow-up probe and γ sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub schema_version: u32,
    pub prior: PriorSpec,
    /// Rank of the degenerate hinge-feature posterior.
    pub rank: usize,
    #[serde(default = "default_lower")]
    pub lower: f64,
    #[serde(default = "default_upper")]
    pub upper: f64,
    pub ms: Vec<usize>,
    pub gammas: Vec<f64>,
    /// Fixed jitter of the unregularized estimate.
    #[serde(default = "default_naive_jitter")]
    pub naive_jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_lower() -> f64 {
    -2.0
}

fn default_upper() -> f64 {
    2.0
}

fn default_naive_jitter() -> f64 {
    1e-10
}

impl ProbeConfig {
    pub fn resolve(self) -> CliResult<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        self.prior.validate()?;
        if self.rank == 0 || self.ms.is_empty() || self.gammas.is_empty() || self.ms.contains(&0) {
            return Err(CliError::Config(
                "rank, ms and gammas must be non-empty and positive".into(),
            ));
        }
        if self.gammas.iter().any(|g| !(*g > 0.0))
            || !(self.naive_jitter >= 0.0)
            || !(self.upper > self.lower)
        {
            return Err(CliError::Config(
                "gammas must be > 0, naive_jitter >= 0 and upper > lower".into(),
            ));
        }
        Ok(self)
    }
}

/// Parses a JSON file, reporting the line and field of any problem.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_experiment(path: &Path) -> CliResult<ExperimentConfig> {
    let cfg: ExperimentConfig = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve(base)
}

pub fn load_probe(path: &Path) -> CliResult<ProbeConfig> {
    read_json::<ProbeConfig>(path)?.resolve()
}
