pub mod eval;
pub mod gen_data;
pub mod impute;
pub mod marginalize;
pub mod predict;
pub mod train;
pub mod train_dependence;

use std::path::{Path, PathBuf};

use crate::CliError;

/// Tracks files written by a command so they can be removed if a later step
/// fails, leaving no partial outputs behind.
pub struct OutputGuard {
    written: Vec<PathBuf>,
    keep: bool,
}

impl OutputGuard {
    pub fn new() -> Self {
        OutputGuard {
            written: Vec::new(),
            keep: false,
        }
    }

    pub fn track(&mut self, path: &Path) {
        self.written.push(path.to_path_buf());
    }

    pub fn commit(mut self) {
        self.keep = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.keep {
            for path in &self.written {
                let _ = std::fs::remove_file(path);
            }
        }
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("cannot serialize: {e}")))?;
    std::fs::write(path, body)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}
