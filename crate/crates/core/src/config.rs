//! The merged run configuration used by the command-line tools.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_SPLIT;
use crate::embed::{GeoEmbedConfig, ImageEmbedConfig, TextEmbedConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub text_embed: TextEmbedConfig,
    pub image_embed: ImageEmbedConfig,
    pub geo_embed: GeoEmbedConfig,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            text_embed: TextEmbedConfig::default(),
            image_embed: ImageEmbedConfig::default(),
            geo_embed: GeoEmbedConfig::default(),
            split: DEFAULT_SPLIT,
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    /// Makes the model's modality dims follow the embedder configs.
    pub fn sync_dims(&mut self) {
        self.model.d_t = self.text_embed.dim_t;
        self.model.d_i = self.image_embed.dim_i;
        self.model.d_g = self.geo_embed.dim_g;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.text_embed.validate()?;
        self.image_embed.validate()?;
        self.geo_embed.validate()?;
        if self.model.d_t != self.text_embed.dim_t
            || self.model.d_i != self.image_embed.dim_i
            || self.model.d_g != self.geo_embed.dim_g
        {
            return Err(Error::config("model modality dims disagree with embedder dims"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        let cfg = RunConfig::from_json(r#"{"split": [0.8, 0.1, 0.1]}"#).unwrap();
        assert_eq!(cfg.split, [0.8, 0.1, 0.1]);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn dim_disagreement_rejected() {
        let mut cfg = RunConfig::default();
        cfg.text_embed.dim_t = 10;
        assert!(cfg.validate().is_err());
        cfg.sync_dims();
        cfg.validate().unwrap();
    }
}
