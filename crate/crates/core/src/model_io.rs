//! Versioned JSON serialization of trained models.
//!
//! Model files carry a `format_version` and a tagged `model` payload (the
//! additive atlas or the joint MLP baseline). Dependence files carry a
//! `dependence` section keyed by conditioning covariate name. Serialization
//! is deterministic: struct fields have a fixed order and maps are sorted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas::{AtlasModel, JointGaussianMlp, MinMax};
use crate::dependence::{DependenceModel, DependenceNet};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// A trained predictor of either kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SavedModel {
    Additive(AtlasModel),
    MlpNll(JointGaussianMlp),
}

impl SavedModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            SavedModel::Additive(m) => m.validate(),
            SavedModel::MlpNll(m) => m.validate(),
        }
    }

    pub fn covariate_names(&self) -> &[String] {
        match self {
            SavedModel::Additive(m) => &m.covariate_names,
            SavedModel::MlpNll(m) => &m.covariate_names,
        }
    }

    pub fn spatial(&self) -> bool {
        match self {
            SavedModel::Additive(m) => m.spatial,
            SavedModel::MlpNll(m) => m.spatial,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: SavedModel,
}

#[derive(Debug, Serialize, Deserialize)]
struct DependenceFile {
    format_version: u32,
    covariate_names: Vec<String>,
    covariates: Vec<MinMax>,
    /// Conditioning covariate name -> its network.
    dependence: BTreeMap<String, DependenceNet>,
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Serialization(format!(
            "{}: format version {found} (this build reads {FORMAT_VERSION})",
            path.display()
        )));
    }
    Ok(())
}

pub fn save_model<P: AsRef<Path>>(path: P, model: &SavedModel) -> Result<()> {
    model.validate()?;
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        model: model.clone(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model<P: AsRef<Path>>(path: P) -> Result<SavedModel> {
    let raw = std::fs::read_to_string(&path).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", path.as_ref().display()))
    })?;
    let file: ModelFile = serde_json::from_str(&raw)?;
    check_version(file.format_version, path.as_ref())?;
    file.model.validate()?;
    Ok(file.model)
}

pub fn save_dependence<P: AsRef<Path>>(path: P, model: &DependenceModel) -> Result<()> {
    model.validate()?;
    let mut dependence = BTreeMap::new();
    for (name, net) in model.covariate_names.iter().zip(&model.nets) {
        dependence.insert(name.clone(), net.clone());
    }
    let file = DependenceFile {
        format_version: FORMAT_VERSION,
        covariate_names: model.covariate_names.clone(),
        covariates: model.covariates.clone(),
        dependence,
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_dependence<P: AsRef<Path>>(path: P) -> Result<DependenceModel> {
    let raw = std::fs::read_to_string(&path).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", path.as_ref().display()))
    })?;
    let file: DependenceFile = serde_json::from_str(&raw)?;
    check_version(file.format_version, path.as_ref())?;
    let mut nets = Vec::with_capacity(file.covariate_names.len());
    for name in &file.covariate_names {
        let net = file.dependence.get(name).ok_or_else(|| {
            Error::Serialization(format!("dependence section is missing covariate \"{name}\""))
        })?;
        nets.push(net.clone());
    }
    let model = DependenceModel {
        nets,
        covariate_names: file.covariate_names,
        covariates: file.covariates,
    };
    model.validate()?;
    Ok(model)
}


#[cfg(test)]
mod float_roundtrip_guard {
    use super::*;
    use crate::atlas::{identity_normalization, AtlasConfig, MonotonePrior};

    #[test]
    fn parameters_survive_json_round_trip_bit_exactly() {
        let model = AtlasModel::untrained(
            vec!["age".into(), "weight".into()],
            true,
            &[MonotonePrior::Increasing, MonotonePrior::None],
            &AtlasConfig { hidden_width: 8, ..AtlasConfig::default() },
            identity_normalization(2, true),
            3,
        )
        .unwrap();
        let json = serde_json::to_string_pretty(&model).unwrap();
        let back: AtlasModel = serde_json::from_str(&json).unwrap();
        let mut a = vec![0.0; model.param_count()];
        let mut b = vec![0.0; back.param_count()];
        model.read_params(&mut a);
        back.read_params(&mut b);
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            assert_eq!(x.to_bits(), y.to_bits(), "param {i}: {x:e} vs {y:e}");
        }
        let pa = model.predict_complete(&[0.3, 0.6], Some(0.5)).unwrap();
        let pb = back.predict_complete(&[0.3, 0.6], Some(0.5)).unwrap();
        assert_eq!(pa.mean.to_bits(), pb.mean.to_bits(), "mean differs");
        assert_eq!(pa.variance.to_bits(), pb.variance.to_bits(), "variance differs");
    }
}
