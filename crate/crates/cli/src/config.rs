use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssmprune_core::ssm::io::load_model;
use ssmprune_core::{Model, ModelConfig, Real};

use crate::error::CliError;

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Weight file, relative to the config file. Seeded random weights otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            weights: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        };
        if let (Some(w), Some(dir)) = (&cfg.weights, path.parent()) {
            if w.is_relative() {
                cfg.weights = Some(dir.join(w));
            }
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Load the weight file, or draw seeded random weights.
    pub fn build<T: Real>(&self, seed: u64) -> Result<Model<T>, CliError> {
        match &self.weights {
            Some(path) => {
                let model: Model<T> = load_model(path)?;
                if model.config != self.model {
                    return Err(CliError::Config(format!(
                        "weights in {} do not match the configured model",
                        path.display()
                    )));
                }
                Ok(model)
            }
            None => Ok(Model::random(self.model.clone(), seed)?),
        }
    }
}
