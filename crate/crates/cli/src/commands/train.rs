use std::path::Path;

use atlas_core::atlas::{fit_atlas, fit_mlp_baseline};
use atlas_core::inference::fit_with_imputation;
use atlas_core::math::derive_seed;
use atlas_core::model_io::{save_dependence, save_model, SavedModel};
use atlas_core::nn::TrainReport;

use super::{ensure_dir, OutputGuard};
use crate::config::{ModelKind, RunConfig};
use crate::CliError;

pub fn run(config_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let seed = seed_override.unwrap_or(config.seed);
    let ds = atlas_core::data::load_csv(&config.data.dataset)?;
    ensure_dir(out_dir)?;

    let train_seed = derive_seed(seed, "cli-train", 0);
    let atlas_config = config.atlas_config(&ds, train_seed);
    let priors = config.priors_for(&ds)?;

    let mut guard = OutputGuard::new();
    let model_path = out_dir.join("model.json");
    let history_path = out_dir.join("loss_history.csv");
    let config_out = out_dir.join("resolved_config.toml");

    let report = match config.model.kind {
        ModelKind::Additive if config.imputation.enabled => {
            let dep_seed = derive_seed(seed, "cli-dependence", 0);
            let dep_config = config.dependence_config(&ds, dep_seed)?;
            let fit = fit_with_imputation(&ds, &atlas_config, &priors, &dep_config)?;
            guard.track(&model_path);
            save_model(&model_path, &SavedModel::Additive(fit.atlas))?;
            let dep_path = out_dir.join("dependence.json");
            guard.track(&dep_path);
            save_dependence(&dep_path, &fit.dependence)?;
            println!(
                "imputed {} incomplete records before atlas training",
                fit.imputed_records
            );
            fit.atlas_report
        }
        ModelKind::Additive => {
            let fit = fit_atlas(&ds, &atlas_config, &priors)?;
            guard.track(&model_path);
            save_model(&model_path, &SavedModel::Additive(fit.model))?;
            fit.report
        }
        ModelKind::MlpNll => {
            if !config.priors.is_empty() {
                return Err(CliError::usage(
                    "monotone priors apply to the additive model, not mlp_nll",
                ));
            }
            let fit = fit_mlp_baseline(&ds, &atlas_config)?;
            guard.track(&model_path);
            save_model(&model_path, &SavedModel::MlpNll(fit.model))?;
            fit.report
        }
    };

    guard.track(&history_path);
    write_history(&history_path, &[("".to_string(), &report)])?;
    guard.track(&config_out);
    config.write_resolved(&config_out, seed, ds.spatial)?;
    guard.commit();

    println!(
        "trained {} epochs; validation NLL {:.6} (initial {:.6})",
        report.history.len(),
        report.best_val_loss,
        report.initial_val_loss
    );
    println!("model: {}", model_path.display());
    Ok(())
}

/// Loss-history CSV; a leading label column distinguishes multiple reports
/// (used by train-dependence with one report per covariate).
pub fn write_history(path: &Path, reports: &[(String, &TrainReport)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(["label", "epoch", "learning_rate", "train_loss", "val_loss"])
        .map_err(|e| CliError::runtime(e.to_string()))?;
    for (label, report) in reports {
        for rec in &report.history {
            w.write_record([
                label.clone(),
                rec.epoch.to_string(),
                format!("{}", rec.learning_rate),
                format!("{}", rec.train_loss),
                format!("{}", rec.val_loss),
            ])
            .map_err(|e| CliError::runtime(e.to_string()))?;
        }
    }
    w.flush()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(())
}
