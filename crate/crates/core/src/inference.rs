//! Missing-covariate imputation and percentile-stationary individualized
//! prediction.
//!
//! Imputation fills each missing covariate from the observed covariate whose
//! conditional predicts it with the smallest variance. Individualized
//! prediction assumes a subject keeps its population percentile between two
//! nearby time points: matching the Gaussian CDFs at the two covariate
//! settings gives
//! `y' = f^m(c', x) + sqrt(f^v(c', x) / f^v(c, x)) · (y − f^m(c, x))`.

use serde::{Deserialize, Serialize};

use crate::atlas::{AtlasConfig, AtlasModel, GaussianParams, MonotonePrior};
use crate::data::{Dataset, Record};
use crate::dependence::{fit_dependence, DependenceConfig, DependenceModel};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::TrainReport;

/// Gaussian CDF: `½·[1 + erf((y − m) / √(2v))]`.
pub fn gaussian_cdf(y: f64, params: &GaussianParams) -> Result<f64> {
    if params.variance <= 0.0 {
        return Err(Error::Domain(format!(
            "CDF needs positive variance, got {}",
            params.variance
        )));
    }
    Ok(0.5 * (1.0 + math::erf((y - params.mean) / (2.0 * params.variance).sqrt())))
}

/// One subject observation used as the anchor of an individualized
/// prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectObservation {
    pub covariates: Vec<f64>,
    pub x: Option<f64>,
    pub response: f64,
    pub time: u32,
}

/// Result of an individualized prediction: the predicted response and the
/// (stationary) population percentile it sits at.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IndividualizedPrediction {
    pub response: f64,
    pub percentile: f64,
}

/// Predicts the response at covariates `c_next` for a subject previously
/// observed at `obs`, keeping the subject's population percentile fixed.
/// Warns when any covariate moves by more than its training interquartile
/// range (the stationarity assumption is only meant for nearby time points).
pub fn individualized_predict(
    atlas: &AtlasModel,
    obs: &SubjectObservation,
    c_next: &[f64],
    x: Option<f64>,
) -> Result<IndividualizedPrediction> {
    let now = atlas.predict_complete(&obs.covariates, obs.x)?;
    let next = atlas.predict_complete(c_next, x)?;
    if now.variance <= 0.0 || next.variance <= 0.0 {
        return Err(Error::Domain("variances must be positive".into()));
    }
    for (i, (a, b)) in obs.covariates.iter().zip(c_next).enumerate() {
        let iqr = atlas.norm.covariate_iqr[i];
        if iqr > 0.0 && (b - a).abs() > iqr {
            log::warn!(
                "covariate {} moves by {} which exceeds its training IQR {iqr}; \
                 percentile stationarity is intended for nearby time points",
                atlas.covariate_names[i],
                (b - a).abs()
            );
        }
    }
    let z = obs.response - now.mean;
    let response = next.mean + (next.variance / now.variance).sqrt() * z;
    let percentile = gaussian_cdf(obs.response, &now)?;
    Ok(IndividualizedPrediction {
        response,
        percentile,
    })
}

/// One imputed covariate entry: where it came from and how uncertain it is.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImputedEntry {
    /// Index of the covariate that was filled in.
    pub index: usize,
    /// Observed covariate chosen as the predictor (smallest conditional
    /// variance; ties broken by lowest index).
    pub source: usize,
    /// Conditional variance of the filled value, original units².
    pub variance: f64,
}

/// A completed covariate vector plus provenance of every filled entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Imputed {
    pub covariates: Vec<f64>,
    pub entries: Vec<ImputedEntry>,
}

/// Fills each missing covariate from the observed covariate whose conditional
/// for the target has the smallest variance. Complete inputs pass through
/// unchanged.
pub fn impute(dep: &DependenceModel, partial: &[Option<f64>]) -> Result<Imputed> {
    if partial.len() != dep.num_covariates() {
        return Err(Error::Config(format!(
            "{} covariates given, dependence model has {}",
            partial.len(),
            dep.num_covariates()
        )));
    }
    let observed: Vec<usize> = (0..partial.len()).filter(|&k| partial[k].is_some()).collect();
    if observed.is_empty() {
        return Err(Error::Data(
            "cannot impute: every covariate is missing".into(),
        ));
    }
    let mut covariates: Vec<f64> = partial.iter().map(|c| c.unwrap_or(f64::NAN)).collect();
    let mut entries = Vec::new();
    for i in 0..partial.len() {
        if partial[i].is_some() {
            continue;
        }
        let mut best: Option<(usize, GaussianParams)> = None;
        for &k in &observed {
            let cond = dep.conditional_1d(k, i, covariates[k])?;
            let better = match &best {
                None => true,
                Some((_, current)) => cond.variance < current.variance,
            };
            if better {
                best = Some((k, cond));
            }
        }
        let (source, cond) = best.expect("at least one observed covariate");
        covariates[i] = cond.mean;
        entries.push(ImputedEntry {
            index: i,
            source,
            variance: cond.variance,
        });
    }
    Ok(Imputed {
        covariates,
        entries,
    })
}

/// Outcome of the imputation training pipeline.
#[derive(Debug)]
pub struct ImputationFit {
    pub atlas: AtlasModel,
    pub dependence: DependenceModel,
    pub atlas_report: TrainReport,
    pub dependence_reports: Vec<TrainReport>,
    /// Number of records whose covariates were imputed before atlas training.
    pub imputed_records: usize,
}

/// Trains on a dataset with missing covariate entries: the dependence model
/// is fit on the complete rows first, incomplete rows are imputed with it,
/// and the atlas is then trained on the union.
pub fn fit_with_imputation(
    ds: &Dataset,
    atlas_config: &AtlasConfig,
    priors: &[MonotonePrior],
    dep_config: &DependenceConfig,
) -> Result<ImputationFit> {
    let dep_fit = fit_dependence(ds, dep_config)?;
    let mut completed = Dataset::new(ds.covariate_names.clone(), ds.spatial);
    completed.landmarks = ds.landmarks.clone();
    let mut imputed_records = 0;
    for rec in &ds.records {
        if rec.is_complete() {
            completed.records.push(rec.clone());
        } else {
            let filled = impute(&dep_fit.model, &rec.covariates)?;
            imputed_records += 1;
            completed.records.push(Record {
                covariates: filled.covariates.into_iter().map(Some).collect(),
                ..rec.clone()
            });
        }
    }
    let atlas_fit = crate::atlas::fit_atlas(&completed, atlas_config, priors)?;
    Ok(ImputationFit {
        atlas: atlas_fit.model,
        dependence: dep_fit.model,
        atlas_report: atlas_fit.report,
        dependence_reports: dep_fit.reports,
        imputed_records,
    })
}
