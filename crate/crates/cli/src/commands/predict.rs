use std::path::Path;

use atlas_core::inference::{individualized_predict, SubjectObservation};
use atlas_core::model_io::{load_model, SavedModel};
use serde::{Deserialize, Serialize};

use super::{read_json, write_json};
use crate::CliError;

#[derive(Deserialize)]
struct PredictQuery {
    covariates_t: Vec<f64>,
    y_t: f64,
    covariates_next: Vec<f64>,
    #[serde(default)]
    x: Option<f64>,
}

#[derive(Serialize)]
struct PredictResponse {
    y_next: f64,
    percentile: f64,
}

pub fn run(model_path: &Path, input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let atlas = match model {
        SavedModel::Additive(m) => m,
        SavedModel::MlpNll(_) => {
            return Err(CliError::usage(
                "individualized prediction needs the additive model",
            ))
        }
    };
    let query: PredictQuery = read_json(input)?;
    let obs = SubjectObservation {
        covariates: query.covariates_t,
        x: query.x,
        response: query.y_t,
        time: 0,
    };
    let pred = individualized_predict(&atlas, &obs, &query.covariates_next, query.x)?;
    let response = PredictResponse {
        y_next: pred.response,
        percentile: pred.percentile,
    };
    match out {
        Some(path) => {
            write_json(path, &response)?;
            println!("prediction: {}", path.display());
        }
        None => {
            let body = serde_json::to_string_pretty(&response)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            println!("{body}");
        }
    }
    Ok(())
}
