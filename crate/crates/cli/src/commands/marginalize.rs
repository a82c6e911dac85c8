use std::path::Path;

use atlas_core::marginal::{
    marginal_curve, CovariateLaw, IndependentMarginals, Integration, SamplingConfig,
};
use atlas_core::math::derive_seed;
use atlas_core::model_io::{load_dependence, load_model, SavedModel};
use serde::Serialize;

use super::{write_json, OutputGuard};
use crate::config::SamplingSection;
use crate::CliError;

pub struct Args<'a> {
    pub model: &'a Path,
    pub covariate: &'a str,
    pub x: Option<f64>,
    pub dependence: &'a str,
    pub dependence_model: Option<&'a Path>,
    pub grid_points: Option<usize>,
    pub grid_min: Option<f64>,
    pub grid_max: Option<f64>,
    pub samples: Option<usize>,
    pub seed: u64,
    pub quadrature: bool,
    pub out: &'a Path,
}

/// The JSON sidecar: everything needed to reproduce the curve.
#[derive(Serialize)]
struct Sidecar {
    model: String,
    dependence_model: Option<String>,
    covariate: String,
    covariate_index: usize,
    x: Option<f64>,
    dependence: String,
    integration: Integration,
    samples: usize,
    /// Seed passed on the command line; per-point seeds derive from the
    /// marginalization stream of this seed.
    seed: u64,
    marginal_seed: u64,
    grid_points: usize,
    grid_min: f64,
    grid_max: f64,
}

pub fn run(args: Args) -> Result<(), CliError> {
    let model = load_model(args.model)?;
    let atlas = match model {
        SavedModel::Additive(m) => m,
        SavedModel::MlpNll(_) => {
            return Err(CliError::usage(
                "marginalization needs the additive model; mlp_nll has no subnetworks",
            ))
        }
    };
    let i = atlas
        .covariate_names
        .iter()
        .position(|n| n == args.covariate)
        .ok_or_else(|| {
            CliError::usage(format!(
                "unknown covariate \"{}\" (model has: {})",
                args.covariate,
                atlas.covariate_names.join(", ")
            ))
        })?;
    match (atlas.spatial, args.x) {
        (true, None) => {
            return Err(CliError::usage("this model is spatial; --x is required"))
        }
        (false, Some(_)) => {
            return Err(CliError::usage(
                "this model is non-spatial; --x must not be given",
            ))
        }
        _ => {}
    }

    let dependence_on = match args.dependence {
        "on" => true,
        "off" => false,
        other => {
            return Err(CliError::usage(format!(
                "--dependence must be \"on\" or \"off\", got \"{other}\""
            )))
        }
    };
    let dep_model = if dependence_on {
        let path = args.dependence_model.ok_or_else(|| {
            CliError::usage("--dependence on requires --dependence-model <path>")
        })?;
        Some(load_dependence(path)?)
    } else {
        None
    };
    let marginals = IndependentMarginals::from_atlas(&atlas);
    let law = match &dep_model {
        Some(dep) => CovariateLaw::Conditional(dep),
        None => CovariateLaw::Independent(&marginals),
    };

    let grid_points = args.grid_points.unwrap_or_else(|| SamplingSection::default().grid_points);
    if grid_points < 2 {
        return Err(CliError::usage("need at least 2 grid points"));
    }
    let mm = atlas.norm.covariates[i];
    let grid_min = args.grid_min.unwrap_or(mm.min);
    let grid_max = args.grid_max.unwrap_or(mm.max);
    if !(grid_max > grid_min) {
        return Err(CliError::usage(format!(
            "empty grid range [{grid_min}, {grid_max}]"
        )));
    }
    let grid: Vec<f64> = (0..grid_points)
        .map(|j| {
            if j + 1 == grid_points {
                grid_max
            } else {
                grid_min + (grid_max - grid_min) * j as f64 / (grid_points - 1) as f64
            }
        })
        .collect();

    let marginal_seed = derive_seed(args.seed, "cli-marginalize", i as u64);
    let sampling = SamplingConfig {
        samples: args.samples.unwrap_or_else(|| SamplingConfig::default().samples),
        seed: marginal_seed,
    };
    let integration = if args.quadrature {
        Integration::GaussHermite
    } else {
        Integration::MonteCarlo
    };

    let curve = marginal_curve(&atlas, law, i, args.x, &grid, &sampling, integration)?;

    let mut guard = OutputGuard::new();
    guard.track(args.out);
    let file = std::fs::File::create(args.out)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", args.out.display())))?;
    curve.write_csv(std::io::BufWriter::new(file))?;

    let sidecar_path = args.out.with_extension("json");
    guard.track(&sidecar_path);
    write_json(
        &sidecar_path,
        &Sidecar {
            model: args.model.display().to_string(),
            dependence_model: args.dependence_model.map(|p| p.display().to_string()),
            covariate: args.covariate.to_string(),
            covariate_index: i,
            x: args.x,
            dependence: args.dependence.to_string(),
            integration,
            samples: sampling.samples,
            seed: args.seed,
            marginal_seed,
            grid_points,
            grid_min,
            grid_max,
        },
    )?;
    guard.commit();

    println!(
        "marginal curve for \"{}\" ({} points, dependence {}): {}",
        args.covariate,
        grid_points,
        args.dependence,
        args.out.display()
    );
    Ok(())
}
