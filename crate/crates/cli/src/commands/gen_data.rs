use std::path::Path;

use atlas_core::data::synthetic::{gen_spatial_population, gen_toy_dependent};

use crate::CliError;

pub fn run(kind: &str, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let ds = match kind {
        "toy" => gen_toy_dependent(n, seed)?,
        "spatial" => gen_spatial_population(n, seed)?,
        other => {
            return Err(CliError::usage(format!(
                "unknown dataset kind \"{other}\" (expected \"toy\" or \"spatial\")"
            )))
        }
    };
    ds.save_csv(out)?;
    println!(
        "wrote {} records ({} covariates{}) to {}",
        ds.len(),
        ds.num_covariates(),
        if ds.spatial { ", spatial" } else { "" },
        out.display()
    );
    Ok(())
}
