use std::path::Path;

use atlas_core::dependence::fit_dependence;
use atlas_core::math::derive_seed;
use atlas_core::model_io::save_dependence;

use super::{ensure_dir, train::write_history, OutputGuard};
use crate::config::RunConfig;
use crate::CliError;

pub fn run(config_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let seed = seed_override.unwrap_or(config.seed);
    let ds = atlas_core::data::load_csv(&config.data.dataset)?;
    ensure_dir(out_dir)?;

    let dep_seed = derive_seed(seed, "cli-dependence", 0);
    let dep_config = config.dependence_config(&ds, dep_seed)?;
    let fit = fit_dependence(&ds, &dep_config)?;

    let mut guard = OutputGuard::new();
    let model_path = out_dir.join("dependence.json");
    guard.track(&model_path);
    save_dependence(&model_path, &fit.model)?;

    let history_path = out_dir.join("dependence_loss_history.csv");
    guard.track(&history_path);
    let labeled: Vec<(String, &atlas_core::nn::TrainReport)> = ds
        .covariate_names
        .iter()
        .zip(&fit.reports)
        .map(|(name, report)| (name.clone(), report))
        .collect();
    write_history(&history_path, &labeled)?;

    let config_out = out_dir.join("resolved_config.toml");
    guard.track(&config_out);
    config.write_resolved(&config_out, seed, ds.spatial)?;
    guard.commit();

    for (name, report) in ds.covariate_names.iter().zip(&fit.reports) {
        println!(
            "g[{name}]: {} epochs, validation NLL {:.6}",
            report.history.len(),
            report.best_val_loss
        );
    }
    println!("dependence model: {}", model_path.display());
    Ok(())
}
