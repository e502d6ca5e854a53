use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use itemdiff_core::client::ClientConfig;
use itemdiff_core::image::ImagePolicy;
use itemdiff_core::predict::BatchConfig;
use itemdiff_core::schemas::ModelConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self { temperature: m.temperature, max_output_tokens: m.max_output_tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchSection {
    pub max_concurrency: usize,
    pub fallback_value: f64,
}

impl Default for BatchSection {
    fn default() -> Self {
        let b = BatchConfig::default();
        Self { max_concurrency: b.max_concurrency, fallback_value: b.fallback_value }
    }
}

/// Contents of the `--config` TOML file. Holds no secrets: the API key is
/// read from the environment variable named in `client.api_key_env_var`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub client: ClientConfig,
    pub model: ModelSection,
    pub batch: BatchSection,
    pub images: ImagePolicy,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let config = match path {
            None => Config::default(),
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: &str| Err(CliError::Config(m.to_string()));
        if self.client.requests_per_minute == 0 {
            return fail("client.requests_per_minute must be at least 1");
        }
        if self.client.model_id.trim().is_empty() {
            return fail("client.model_id must not be empty");
        }
        if self.batch.max_concurrency == 0 {
            return fail("batch.max_concurrency must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.batch.fallback_value) {
            return fail("batch.fallback_value must lie in [0, 1]");
        }
        if self.model.temperature.is_nan() || self.model.temperature < 0.0 {
            return fail("model.temperature must be non-negative");
        }
        if self.model.max_output_tokens == 0 {
            return fail("model.max_output_tokens must be positive");
        }
        if self.images.raster_width == 0 {
            return fail("images.raster_width must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            model_id: self.client.model_id.clone(),
            temperature: self.model.temperature,
            max_output_tokens: self.model.max_output_tokens,
        }
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            max_concurrency: self.batch.max_concurrency,
            fallback_value: self.batch.fallback_value,
            image_policy: self.images.clone(),
        }
    }
}
