//! Subcommand implementations. Each writes its artifacts under an output
//! directory and never embeds timestamps, so reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use gfsvi_core::numerics::{derive_seed, seeded_rng};
use gfsvi_core::objective::{kl_blowup_probe, FeaturePosterior};
use gfsvi_core::trainer::MeasurementSampler;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{
    load_experiment, load_probe, read_json, ExperimentConfig, GridSpec, PriorConfig,
};
use crate::pipeline::{
    default_protocol, evaluate, fit, fold_splits, grid_csv, grid_points, holdout_splits, load_pool,
    metrics_csv, reference_gp, report, resolved_gp_prior, trace_csv, Fitted, FoldReport, ModelFile,
    Protocol, Report, Splits,
};
use crate::{CliError, CliResult};

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn output_dir(flag: Option<&Path>, cfg: Option<&ExperimentConfig>) -> CliResult<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .ok_or_else(|| CliError::Config("output_dir: pass --out or set output_dir".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Loads a config, applies the seed override and records the output
/// directory so the resolved echo reproduces the run.
fn prepare(
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = load_experiment(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = output_dir(out, Some(&cfg))?;
    cfg.output_dir = Some(dir.clone());
    write_json(&dir.join("config.resolved.json"), &cfg)?;
    Ok((cfg, dir))
}

fn write_fit_artifacts(dir: &Path, cfg: &ExperimentConfig, fitted: &Fitted) -> CliResult<()> {
    if let Some(file) = ModelFile::from_fitted(fitted, cfg) {
        write_json(&dir.join("checkpoint.json"), &file)?;
    }
    if let Fitted::Network { trace, .. } = fitted {
        fs::write(dir.join("trace.csv"), trace_csv(trace))?;
    }
    Ok(())
}

fn training_summary(fitted: &Fitted) -> Option<crate::pipeline::TrainSummary> {
    match fitted {
        Fitted::Network { summary, .. } => Some(*summary),
        Fitted::Gp { .. } => None,
    }
}

fn write_grid(
    dir: &Path,
    name: &str,
    fitted: &Fitted,
    spec: &GridSpec,
    seed: u64,
) -> CliResult<PathBuf> {
    let grids = dir.join("grids");
    fs::create_dir_all(&grids)?;
    let path = grids.join(format!("{name}.csv"));
    let xs = grid_points(spec);
    fs::write(&path, grid_csv(fitted, &xs, spec.samples, seed)?)?;
    Ok(path)
}

/// Trains on the hold-out split and writes checkpoint, trace, report and
/// the configured grid.
pub fn cmd_train(config: &Path, out: Option<&Path>, seed: Option<u64>) -> CliResult<Report> {
    let (cfg, dir) = prepare(config, out, seed)?;
    let splits = holdout_splits(&cfg)?;
    let fitted = fit(&cfg, &splits, cfg.seed)?;
    write_fit_artifacts(&dir, &cfg, &fitted)?;
    let protocol = default_protocol(&cfg);
    let metrics = evaluate(&fitted, protocol, &splits, None, None, cfg.seed)?;
    let rep = report(
        &cfg,
        protocol,
        vec![FoldReport {
            fold: 0,
            metrics,
            training: training_summary(&fitted),
        }],
    );
    write_json(&dir.join("report.json"), &rep)?;
    if let Some(spec) = &cfg.grid {
        check_grid_dim(spec, splits.train.dim())?;
        write_grid(&dir, "posterior", &fitted, spec, cfg.seed)?;
    }
    Ok(rep)
}

fn check_grid_dim(spec: &GridSpec, dim: usize) -> CliResult<()> {
    if spec.lower.len() != dim {
        return Err(CliError::Config(format!(
            "grid: {} dimensions for {dim}-dimensional inputs",
            spec.lower.len()
        )));
    }
    Ok(())
}

fn fitted_for_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    splits: &Splits,
) -> CliResult<Fitted> {
    match checkpoint {
        Some(path) => read_json::<ModelFile>(path)?.into_fitted(),
        None if matches!(cfg.method, crate::config::MethodName::Gp) => fit(cfg, splits, cfg.seed),
        None => Err(CliError::Config(
            "checkpoint: required for network methods".into(),
        )),
    }
}

/// Evaluates a checkpoint (or the config's exact GP) on the hold-out test
/// split under `protocol`.
pub fn cmd_eval(
    config: &Path,
    checkpoint: Option<&Path>,
    protocol: Protocol,
    reference: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> CliResult<Report> {
    let (cfg, dir) = prepare(config, out, seed)?;
    if protocol == Protocol::W2 && reference.is_none() {
        return Err(CliError::Config(
            "reference: protocol w2 requires a GP reference config".into(),
        ));
    }
    let splits = holdout_splits(&cfg)?;
    let fitted = fitted_for_eval(&cfg, checkpoint, &splits)?;
    let gp = match reference {
        Some(path) => {
            let mut r = load_experiment(path)?;
            r.seed = cfg.seed;
            Some(reference_gp(&r, &splits, cfg.seed)?)
        }
        None => None,
    };
    let grid = match &cfg.grid {
        Some(spec) => {
            check_grid_dim(spec, splits.train.dim())?;
            Some(grid_points(spec))
        }
        None => None,
    };
    let metrics = evaluate(
        &fitted,
        protocol,
        &splits,
        gp.as_ref(),
        grid.as_ref(),
        cfg.seed,
    )?;
    let rep = report(
        &cfg,
        protocol,
        vec![FoldReport {
            fold: 0,
            metrics,
            training: None,
        }],
    );
    write_json(&dir.join("report.json"), &rep)?;
    Ok(rep)
}

/// k-fold cross-validation with up to `jobs` folds in parallel.
pub fn cmd_cv(
    config: &Path,
    folds: Option<usize>,
    jobs: usize,
    out: Option<&Path>,
    seed: Option<u64>,
) -> CliResult<Report> {
    let mut cfg = load_experiment(config)?;
    if let Some(k) = folds {
        cfg.cv.n_folds = k;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = output_dir(out, Some(&cfg))?;
    cfg.output_dir = Some(dir.clone());
    write_json(&dir.join("config.resolved.json"), &cfg)?;
    let pool = load_pool(&cfg)?;
    let protocol = default_protocol(&cfg);
    let run_fold = |k: usize| -> CliResult<(FoldReport, Fitted)> {
        let fold_seed = derive_seed(cfg.seed, &format!("fold-{k}"));
        let splits = fold_splits(&cfg, &pool, k)?;
        let fitted = fit(&cfg, &splits, fold_seed)?;
        let metrics = evaluate(&fitted, protocol, &splits, None, None, fold_seed)?;
        Ok((
            FoldReport {
                fold: k,
                metrics,
                training: training_summary(&fitted),
            },
            fitted,
        ))
    };
    let pool_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    let results: Vec<CliResult<(FoldReport, Fitted)>> =
        pool_threads.install(|| (0..cfg.cv.n_folds).into_par_iter().map(run_fold).collect());
    let mut fold_reports = Vec::with_capacity(results.len());
    for (k, r) in results.into_iter().enumerate() {
        let (fold_report, fitted) = r.map_err(|e| e.context(&format!("fold {k}")))?;
        let fold_dir = dir.join("folds").join(format!("fold_{k}"));
        fs::create_dir_all(&fold_dir)?;
        write_fit_artifacts(&fold_dir, &cfg, &fitted)?;
        fold_reports.push(fold_report);
    }
    let rep = report(&cfg, protocol, fold_reports);
    write_json(&dir.join("report.json"), &rep)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&rep))?;
    Ok(rep)
}

/// Posterior summaries and function draws on a grid, from a checkpoint or
/// from the config's exact GP.
pub fn cmd_posterior_grid(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    grid: Option<GridSpec>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> CliResult<PathBuf> {
    let (fitted, cfg_grid, dir, seed) = match (config, checkpoint) {
        (_, Some(ck)) => {
            let fitted = read_json::<ModelFile>(ck)?.into_fitted()?;
            let cfg = config.map(load_experiment).transpose()?;
            let dir = output_dir(out, cfg.as_ref())?;
            let s = seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
            (fitted, cfg.and_then(|c| c.grid), dir, s)
        }
        (Some(path), None) => {
            let (mut cfg, dir) = prepare(path, out, seed)?;
            let splits = holdout_splits(&cfg)?;
            let fitted = fitted_for_eval(&cfg, None, &splits)?;
            (fitted, cfg.grid.take(), dir, cfg.seed)
        }
        (None, None) => return Err(CliError::Config("pass --checkpoint or --config".into())),
    };
    let spec = grid
        .or(cfg_grid)
        .ok_or_else(|| CliError::Config("grid: pass --grid or set grid in the config".into()))?;
    if let Fitted::Network { model, .. } = &fitted {
        check_grid_dim(&spec, model.arch.input_dim)?;
    }
    write_grid(&dir, "posterior", &fitted, &spec, seed)
}

/// Fits GP hyperparameters on the training split and writes `prior.json`.
pub fn cmd_fit_prior(
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> CliResult<gfsvi_core::kernels::PriorSpec> {
    let (mut cfg, dir) = prepare(config, out, seed)?;
    if !matches!(cfg.prior, PriorConfig::Gp(_)) {
        return Err(CliError::Config("prior: fit-prior needs a gp prior".into()));
    }
    if cfg.fit_prior.is_none() {
        cfg.fit_prior = Some(Default::default());
    }
    let splits = holdout_splits(&cfg)?;
    let prior = resolved_gp_prior(&cfg, &splits.train, cfg.seed)?.expect("gp prior");
    write_json(&dir.join("prior.json"), &prior)?;
    Ok(prior)
}

/// Naive and regularized KL of a degenerate hinge posterior against a GP
/// prior for every `(M, γ)` pair; writes `probe.csv`.
pub fn cmd_probe_kl(config: &Path, out: Option<&Path>, seed: Option<u64>) -> CliResult<PathBuf> {
    let mut cfg = load_probe(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = output_dir(out, None)?;
    write_json(&dir.join("config.resolved.json"), &cfg)?;
    let family = FeaturePosterior::hinges(cfg.rank, cfg.lower, cfg.upper);
    let sampler = MeasurementSampler::new(vec![cfg.lower], vec![cfg.upper], 1)?;
    let mut s = String::from("m,gamma,naive_kl,reg_kl\n");
    for &gamma in &cfg.gammas {
        let mut rng = seeded_rng(derive_seed(cfg.seed, "probe"));
        let rows = kl_blowup_probe(
            &family,
            &cfg.prior,
            &sampler,
            &cfg.ms,
            cfg.naive_jitter,
            gamma,
            &mut rng,
        )?;
        for r in rows {
            s.push_str(&format!(
                "{},{:e},{},{}\n",
                r.m, gamma, r.naive_kl, r.reg_kl
            ));
        }
    }
    let path = dir.join("probe.csv");
    fs::write(&path, s)?;
    Ok(path)
}
