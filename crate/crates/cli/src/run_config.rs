use std::path::{Path, PathBuf};

use anyhow::Context;
use pamfn::config::ModelConfig;
use pamfn::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Manifest path; relative paths resolve against the config file.
    pub manifest: PathBuf,
}

/// Everything a run needs, as read from a config file and then overridden
/// by flags. The resolved value is written into the run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run")]
    pub run: String,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_run() -> String {
    "default".into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(CliError::Usage)?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))
            .map_err(CliError::Usage)?;
        if cfg.data.manifest.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.data.manifest = base.join(&cfg.data.manifest);
        }
        Ok(cfg)
    }

    pub fn snapshot(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(e.into()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.into()))?;
        if self.run.is_empty() || self.run.contains(['/', '\\']) {
            return Err(CliError::usage(format!("run name `{}` must be a plain directory name", self.run)));
        }
        Ok(())
    }
}
