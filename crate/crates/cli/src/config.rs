//! The structured run configuration. Unknown keys are rejected, every
//! optional field has the documented default, and the fully resolved form is
//! written next to each run's outputs so any run can be reproduced from it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use atlas_core::atlas::{AtlasConfig, MonotonePrior};
use atlas_core::dependence::DependenceConfig;
use atlas_core::marginal::SamplingConfig;
use atlas_core::nn::TrainConfig;
use atlas_core::Dataset;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// The single top-level seed; every randomized step derives its own
    /// stream from it (see the seed-splitting notes in the README).
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    /// Per-covariate monotone priors, keyed by covariate name.
    #[serde(default)]
    pub priors: BTreeMap<String, PriorKind>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub dependence: DependenceSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    /// Named landmark depths for per-location evaluation.
    #[serde(default)]
    pub landmarks: BTreeMap<String, f64>,
    #[serde(default)]
    pub imputation: ImputationSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Additive,
    MlpNll,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden_width: usize,
    pub group_size: usize,
    pub monotone_lambda: f64,
    pub variance_floor: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = AtlasConfig::default();
        ModelSection {
            kind: ModelKind::Additive,
            hidden_width: base.hidden_width,
            group_size: base.group_size,
            monotone_lambda: base.monotone_lambda,
            variance_floor: base.variance_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Increasing,
    Decreasing,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Resolved to 1024 for spatial datasets and 32 otherwise when absent.
    pub batch_size: Option<usize>,
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            learning_rate: base.learning_rate,
            max_epochs: base.max_epochs,
            batch_size: None,
            patience: base.patience,
            validation_fraction: base.validation_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DependenceSection {
    pub hidden_width: usize,
    pub group_size: usize,
    pub lambda: f64,
    /// Variance floor on the conditional covariance diagonal, normalized
    /// units (the Cholesky diagonal shift is its square root).
    pub variance_floor: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: Option<usize>,
    pub patience: usize,
    pub validation_fraction: f64,
    /// Increasing monotone pair priors, as [conditioning, target] covariate
    /// names.
    pub pair_priors: Vec<(String, String)>,
}

impl Default for DependenceSection {
    fn default() -> Self {
        let base = DependenceConfig::default();
        DependenceSection {
            hidden_width: base.hidden_width,
            group_size: base.group_size,
            lambda: base.lambda,
            variance_floor: base.chol_diag_shift * base.chol_diag_shift,
            learning_rate: base.train.learning_rate,
            max_epochs: base.train.max_epochs,
            batch_size: None,
            patience: base.train.patience,
            validation_fraction: base.train.validation_fraction,
            pair_priors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub samples: usize,
    pub grid_points: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            samples: SamplingConfig::default().samples,
            grid_points: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputationSection {
    /// Train the dependence model on complete rows first, impute the
    /// incomplete rows, and include them in atlas training.
    pub enabled: bool,
}

#[allow(clippy::derivable_impls)]
impl Default for ImputationSection {
    fn default() -> Self {
        ImputationSection { enabled: false }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))?;
        toml::from_str(&raw)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    /// Effective batch size for a dataset: configured, or the spatial default.
    pub fn resolve_batch(batch: Option<usize>, spatial: bool) -> usize {
        batch.unwrap_or(if spatial { 1024 } else { 32 })
    }

    pub fn atlas_config(&self, ds: &Dataset, seed: u64) -> AtlasConfig {
        AtlasConfig {
            hidden_width: self.model.hidden_width,
            group_size: self.model.group_size,
            monotone_lambda: self.model.monotone_lambda,
            variance_floor: self.model.variance_floor,
            train: TrainConfig {
                learning_rate: self.train.learning_rate,
                max_epochs: self.train.max_epochs,
                batch_size: Self::resolve_batch(self.train.batch_size, ds.spatial),
                patience: self.train.patience,
                validation_fraction: self.train.validation_fraction,
                seed,
            },
        }
    }

    pub fn dependence_config(&self, ds: &Dataset, seed: u64) -> Result<DependenceConfig, CliError> {
        let mut pair_priors = Vec::new();
        for (source, target) in &self.dependence.pair_priors {
            let s = ds.covariate_index(source).ok_or_else(|| {
                CliError::usage(format!("pair prior names unknown covariate \"{source}\""))
            })?;
            let t = ds.covariate_index(target).ok_or_else(|| {
                CliError::usage(format!("pair prior names unknown covariate \"{target}\""))
            })?;
            pair_priors.push((s, t));
        }
        Ok(DependenceConfig {
            hidden_width: self.dependence.hidden_width,
            group_size: self.dependence.group_size,
            lambda: self.dependence.lambda,
            chol_diag_shift: self.dependence.variance_floor.max(0.0).sqrt(),
            pair_priors,
            train: TrainConfig {
                learning_rate: self.dependence.learning_rate,
                max_epochs: self.dependence.max_epochs,
                batch_size: Self::resolve_batch(self.dependence.batch_size, ds.spatial),
                patience: self.dependence.patience,
                validation_fraction: self.dependence.validation_fraction,
                seed,
            },
        })
    }

    /// Per-covariate monotone priors in schema order; every prior key must
    /// name a covariate.
    pub fn priors_for(&self, ds: &Dataset) -> Result<Vec<MonotonePrior>, CliError> {
        for name in self.priors.keys() {
            if ds.covariate_index(name).is_none() {
                return Err(CliError::usage(format!(
                    "prior names unknown covariate \"{name}\" (dataset has: {})",
                    ds.covariate_names.join(", ")
                )));
            }
        }
        Ok(ds
            .covariate_names
            .iter()
            .map(|name| match self.priors.get(name) {
                Some(PriorKind::Increasing) => MonotonePrior::Increasing,
                Some(PriorKind::Decreasing) => MonotonePrior::Decreasing,
                None => MonotonePrior::None,
            })
            .collect())
    }

    /// The resolved form written next to run outputs: every default filled
    /// in, the effective seed recorded, and batch sizes pinned.
    pub fn resolved(&self, seed: u64, spatial: bool) -> RunConfig {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.train.batch_size = Some(Self::resolve_batch(cfg.train.batch_size, spatial));
        cfg.dependence.batch_size = Some(Self::resolve_batch(cfg.dependence.batch_size, spatial));
        cfg
    }

    pub fn write_resolved(&self, path: &Path, seed: u64, spatial: bool) -> Result<(), CliError> {
        let resolved = self.resolved(seed, spatial);
        let body = toml::to_string_pretty(&resolved)
            .map_err(|e| CliError::runtime(format!("cannot serialize config: {e}")))?;
        std::fs::write(path, body)
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}
