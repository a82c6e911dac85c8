use std::path::Path;

use atlas_core::inference::impute;
use atlas_core::model_io::load_dependence;
use serde::{Deserialize, Serialize};

use super::{read_json, write_json};
use crate::CliError;

#[derive(Deserialize)]
struct ImputeQuery {
    /// Covariate values in schema order; null means missing.
    covariates: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct ImputeResponse {
    covariates: Vec<f64>,
    entries: Vec<atlas_core::inference::ImputedEntry>,
}

pub fn run(dependence_path: &Path, input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let dep = load_dependence(dependence_path)?;
    let query: ImputeQuery = read_json(input)?;
    let result = impute(&dep, &query.covariates)?;
    let response = ImputeResponse {
        covariates: result.covariates,
        entries: result.entries,
    };
    match out {
        Some(path) => {
            write_json(path, &response)?;
            println!("imputation: {}", path.display());
        }
        None => {
            let body = serde_json::to_string_pretty(&response)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            println!("{body}");
        }
    }
    Ok(())
}
