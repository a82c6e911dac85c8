use std::path::Path;

use atlas_core::metrics;
use atlas_core::model_io::{load_model, SavedModel};
use atlas_core::GaussianParams;
use serde::Serialize;

use super::write_json;
use crate::config::RunConfig;
use crate::CliError;

#[derive(Serialize)]
struct EvalOutput {
    model: String,
    data: String,
    bins: usize,
    report: metrics::EvalReport,
}

pub fn run(
    model_path: &Path,
    data_path: &Path,
    config_path: Option<&Path>,
    bins: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let ds = atlas_core::data::load_csv(data_path)?;
    if ds.covariate_names != model.covariate_names() {
        return Err(CliError::usage(format!(
            "dataset covariates ({}) do not match the model ({})",
            ds.covariate_names.join(", "),
            model.covariate_names().join(", ")
        )));
    }

    let mut landmarks = ds.landmarks.clone();
    if let Some(path) = config_path {
        let config = RunConfig::load(path)?;
        landmarks.extend(config.landmarks);
    }

    let mut params: Vec<GaussianParams> = Vec::with_capacity(ds.len());
    let mut truths = Vec::with_capacity(ds.len());
    let mut xs = Vec::with_capacity(ds.len());
    for rec in &ds.records {
        let p = match &model {
            SavedModel::Additive(m) => m.predict(&rec.covariates, rec.x)?,
            SavedModel::MlpNll(m) => m.predict(&rec.covariates, rec.x)?,
        };
        params.push(p);
        truths.push(rec.response);
        xs.push(rec.x);
    }

    let report = metrics::report(&params, &truths, Some(&xs), &landmarks, bins)?;
    print!("{}", report.render_table());

    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| model_path.with_file_name("report.json"));
    write_json(
        &out_path,
        &EvalOutput {
            model: model_path.display().to_string(),
            data: data_path.display().to_string(),
            bins,
            report,
        },
    )?;
    println!("report: {}", out_path.display());
    Ok(())
}
