//! TOML run configuration.
//!
//! ```toml
//! embedding_dim = 300
//!
//! [train]
//! epochs = 30
//! batch_size = 16
//!
//! [link]
//! window = 3
//! ```
//!
//! Every key is optional; missing keys take the library defaults.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use kgcopy::corpus::LinkConfig;
use kgcopy::embeddings::DEFAULT_DIM;
use kgcopy::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub embedding_dim: usize,
    pub train: TrainConfig,
    pub link: LinkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embedding_dim: DEFAULT_DIM,
            train: TrainConfig::default(),
            link: LinkConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.train.validate()?;
        Ok(config)
    }
}
