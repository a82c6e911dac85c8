//! `atlas`: train, evaluate, and interrogate interpretable spatial-atlas
//! regression models from the command line.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors (bad paths,
//! malformed config, unknown covariate names, schema violations), 1 for
//! runtime failures (numerical problems, failed writes).

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug)]
pub enum CliError {
    /// User/configuration problem; exit code 2.
    Usage(String),
    /// Runtime failure; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl From<atlas_core::Error> for CliError {
    fn from(e: atlas_core::Error) -> Self {
        use atlas_core::Error::*;
        match e {
            Config(_) | Data(_) | Csv { .. } | MissingCovariate { .. } | Domain(_)
            | Untrained(_) => CliError::Usage(e.to_string()),
            Numerical { .. } | DependenceMisfit(_) | Io(_) | Serialization(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

#[derive(Parser)]
#[command(
    name = "atlas",
    version,
    about = "Interpretable spatial-atlas regression: additive mean/variance subnetworks, \
             monotone priors, covariate dependence, and marginalized response curves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV.
    GenData {
        /// "toy" (two dependent covariates, non-spatial) or "spatial"
        /// (three dependent covariates, 50 depths per subject).
        #[arg(long)]
        kind: String,
        /// Records for "toy", subjects for "spatial".
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model per the config file; writes model.json,
    /// loss_history.csv, and resolved_config.toml into --out-dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the covariate-dependence networks; writes dependence.json,
    /// dependence_loss_history.csv, and resolved_config.toml into --out-dir.
    TrainDependence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained model on a dataset: MARPD, NLL, ECE, and
    /// per-landmark breakdowns.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional config providing [landmarks].
        #[arg(long)]
        config: Option<PathBuf>,
        /// Coverage levels for the calibration error.
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Report JSON path (defaults to report.json next to the model).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the marginal response curve of one covariate as CSV plus a JSON
    /// sidecar with the exact configuration and seeds.
    Marginalize {
        #[arg(long)]
        model: PathBuf,
        /// Covariate name to marginalize onto.
        #[arg(long)]
        covariate: String,
        /// Location; required iff the model is spatial.
        #[arg(long)]
        x: Option<f64>,
        /// "on" samples the trained conditional dependence model;
        /// "off" samples unconditional covariate marginals.
        #[arg(long, default_value = "on")]
        dependence: String,
        /// Trained dependence model (required with --dependence on).
        #[arg(long)]
        dependence_model: Option<PathBuf>,
        #[arg(long)]
        grid_points: Option<usize>,
        #[arg(long)]
        grid_min: Option<f64>,
        #[arg(long)]
        grid_max: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// 64-node Gauss-Hermite quadrature for the 1-D integrals instead of
        /// Monte Carlo.
        #[arg(long)]
        quadrature: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill missing covariates from the lowest-variance conditional.
    /// Input JSON: {"covariates": [1.0, null, ...]}.
    Impute {
        #[arg(long)]
        dependence_model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Percentile-stationary individualized prediction.
    /// Input JSON: {"covariates_t": [...], "y_t": 1.2,
    /// "covariates_next": [...], "x": 0.5}.
    PredictIndividual {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { kind, n, seed, out } => commands::gen_data::run(&kind, n, seed, &out),
        Command::Train {
            config,
            out_dir,
            seed,
        } => commands::train::run(&config, &out_dir, seed),
        Command::TrainDependence {
            config,
            out_dir,
            seed,
        } => commands::train_dependence::run(&config, &out_dir, seed),
        Command::Eval {
            model,
            data,
            config,
            bins,
            out,
        } => commands::eval::run(&model, &data, config.as_deref(), bins, out.as_deref()),
        Command::Marginalize {
            model,
            covariate,
            x,
            dependence,
            dependence_model,
            grid_points,
            grid_min,
            grid_max,
            samples,
            seed,
            quadrature,
            out,
        } => commands::marginalize::run(commands::marginalize::Args {
            model: &model,
            covariate: &covariate,
            x,
            dependence: &dependence,
            dependence_model: dependence_model.as_deref(),
            grid_points,
            grid_min,
            grid_max,
            samples,
            seed,
            quadrature,
            out: &out,
        }),
        Command::Impute {
            dependence_model,
            input,
            out,
        } => commands::impute::run(&dependence_model, &input, out.as_deref()),
        Command::PredictIndividual { model, input, out } => {
            commands::predict::run(&model, &input, out.as_deref())
        }
    };
    match result {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}
