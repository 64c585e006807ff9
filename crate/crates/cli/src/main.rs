//! `gfsvi` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gfsvi_cli::commands::{
    cmd_cv, cmd_eval, cmd_fit_prior, cmd_posterior_grid, cmd_probe_kl, cmd_train,
};
use gfsvi_cli::config::GridSpec;
use gfsvi_cli::pipeline::Protocol;
use gfsvi_cli::{CliError, CliResult, EXIT_CONFIG};

#[derive(Debug, Parser)]
#[command(
    name = "gfsvi",
    version,
    about = "Function-space variational inference experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint, trace and report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint or an exact GP under a protocol.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// GP config the w2 protocol compares against.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// k-fold cross-validation with aggregated report.
    Cv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        /// Folds trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Posterior mean, std and function draws on a 1-D or 2-D grid.
    PosteriorGrid {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `lower:upper:points`, once per input dimension.
        #[arg(long = "grid", allow_hyphen_values = true)]
        grid: Vec<String>,
        /// Number of function draws.
        #[arg(long, default_value_t = 0)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Fit GP hyperparameters by mini-batch marginal likelihood.
    FitPrior {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Naive versus regularized KL for a degenerate posterior.
    ProbeKl {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_grid(axes: &[String], samples: usize) -> CliResult<Option<GridSpec>> {
    if axes.is_empty() {
        return Ok(None);
    }
    let mut spec = GridSpec {
        lower: Vec::new(),
        upper: Vec::new(),
        points: Vec::new(),
        samples,
    };
    for axis in axes {
        let parts: Vec<&str> = axis.split(':').collect();
        let bad = || CliError::Config(format!("grid: expected lower:upper:points, got {axis}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        spec.lower.push(parts[0].parse().map_err(|_| bad())?);
        spec.upper.push(parts[1].parse().map_err(|_| bad())?);
        let n: usize = parts[2].parse().map_err(|_| bad())?;
        if n < 2 {
            return Err(bad());
        }
        spec.points.push(n);
    }
    if spec.lower.len() > 2 {
        return Err(CliError::Config("grid: at most two dimensions".into()));
    }
    Ok(Some(spec))
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Train { config, common } => {
            let r = cmd_train(&config, common.out.as_deref(), common.seed)?;
            Ok(serde_json::to_string(&r.aggregate).unwrap_or_default())
        }
        Command::Eval {
            config,
            checkpoint,
            protocol,
            reference,
            common,
        } => {
            let r = cmd_eval(
                &config,
                checkpoint.as_deref(),
                protocol,
                reference.as_deref(),
                common.out.as_deref(),
                common.seed,
            )?;
            Ok(serde_json::to_string(&r.aggregate).unwrap_or_default())
        }
        Command::Cv {
            config,
            folds,
            jobs,
            common,
        } => {
            let r = cmd_cv(&config, folds, jobs, common.out.as_deref(), common.seed)?;
            Ok(serde_json::to_string(&r.aggregate).unwrap_or_default())
        }
        Command::PosteriorGrid {
            config,
            checkpoint,
            grid,
            samples,
            common,
        } => {
            let mut spec = parse_grid(&grid, samples)?;
            if spec.is_none() && samples > 0 {
                return Err(CliError::Config(
                    "samples: pass --grid together with --samples".into(),
                ));
            }
            if let Some(s) = spec.as_mut() {
                s.samples = samples;
            }
            let path = cmd_posterior_grid(
                config.as_deref(),
                checkpoint.as_deref(),
                spec,
                common.out.as_deref(),
                common.seed,
            )?;
            Ok(path.display().to_string())
        }
        Command::FitPrior { config, common } => {
            let p = cmd_fit_prior(&config, common.out.as_deref(), common.seed)?;
            Ok(serde_json::to_string(&p).unwrap_or_default())
        }
        Command::ProbeKl { config, common } => {
            Ok(cmd_probe_kl(&config, common.out.as_deref(), common.seed)?
                .display()
                .to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
