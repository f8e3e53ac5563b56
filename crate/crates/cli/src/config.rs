//! Run configuration file and path resolution.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lightccf::trainer::{Objective, TrainConfig};
use serde::{Deserialize, Serialize};

/// Relative data paths are resolved against this directory when set.
pub const DATA_ROOT_ENV: &str = "LIGHTCCF_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Split directory written by `prepare`.
    pub data: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub grid: GridSection,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `[lower, upper]` train-count cut points; tertiles when absent.
    pub group_boundaries: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub taus: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            taus: vec![0.1, 0.2, 0.5, 1.0],
            alphas: vec![0.1, 0.5, 1.0, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub epochs: usize,
    pub objectives: Vec<Objective>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            epochs: 3,
            objectives: vec![
                Objective::BprOnly,
                Objective::ClSs,
                Objective::ClUi,
                Objective::Lightccf,
            ],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Full config with every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// `--data` wins over the config's `data`; relative paths are joined onto
/// the data root when the environment variable is set.
pub fn resolve_data(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.clone())
        .context("no data directory: pass --data or set `data` in the config")?;
    Ok(match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if path.is_relative() => {
            let joined = PathBuf::from(root).join(path);
            log::info!("data resolved against {DATA_ROOT_ENV}: {}", joined.display());
            joined
        }
        _ => path,
    })
}
