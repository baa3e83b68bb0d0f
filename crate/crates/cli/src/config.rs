//! Optional TOML config shared by every command.
//!
//! ```toml
//! seed = 3
//! data_dir = "data"
//!
//! [synth]
//! n_regions = 8
//!
//! [train]
//! epochs = 150
//! w3 = 0.5
//! ```
//!
//! Flags override file values, which override built-in defaults.

use std::path::{Path, PathBuf};

use epigraph::data::SynthConfig;
use epigraph::train::TrainConfig;
use serde::Deserialize;

use crate::error::{CliError, Result};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "EPIGRAPH_DATA_DIR";

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub train: Option<TrainConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(FileConfig::default()), FileConfig::load)
    }

    /// `flag`, then the config file, then the environment.
    pub fn data_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.to_path_buf());
        }
        if let Some(p) = &self.data_dir {
            return Ok(p.clone());
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
            _ => Err(CliError::Usage(format!(
                "no data directory: pass --data, set data_dir in the config file or set {DATA_DIR_ENV}"
            ))),
        }
    }
}
