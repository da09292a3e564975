//! Checkpoint file: model config, embedder configs and every parameter
//! matrix, as a single JSON document.
//!
//! Floats are written with shortest round-trip formatting and parsed with
//! correct rounding, so save followed by load reproduces every parameter
//! bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{DefaultEmbedders, GeoEmbedConfig, ImageEmbedConfig, TextEmbedConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub text_embed: TextEmbedConfig,
    pub image_embed: ImageEmbedConfig,
    pub geo_embed: GeoEmbedConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(
        model: ModelConfig,
        text_embed: TextEmbedConfig,
        image_embed: ImageEmbedConfig,
        geo_embed: GeoEmbedConfig,
        params: ModelParams,
    ) -> Result<Self> {
        let ckpt = Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model,
            text_embed,
            image_embed,
            geo_embed,
            params,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        self.model.validate()?;
        if self.text_embed.dim_t != self.model.d_t
            || self.image_embed.dim_i != self.model.d_i
            || self.geo_embed.dim_g != self.model.d_g
        {
            return Err(Error::config("embedder dims disagree with model dims"));
        }
        self.params.validate(&self.model)
    }

    pub fn embedders(&self) -> Result<DefaultEmbedders> {
        DefaultEmbedders::new(self.text_embed, self.image_embed, self.geo_embed)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamName;
    use crate::rng::Rng;

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::init(&cfg, &mut Rng::new(seed)).unwrap();
        // awkward values that need all 17 significant digits
        params.b_c.data_mut()[0] = 0.1 + 0.2;
        params.b_a.data_mut()[3] = -1.0e-300;
        Checkpoint::new(
            cfg,
            TextEmbedConfig::default(),
            ImageEmbedConfig::default(),
            GeoEmbedConfig::default(),
            params,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ckpt = sample_checkpoint(3);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        for name in ParamName::ALL {
            let a = ckpt.params.get(name).data();
            let b = back.params.get(name).data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
        }
        assert_eq!(back, ckpt);
    }

    #[test]
    fn serialization_is_stable() {
        assert_eq!(
            sample_checkpoint(4).to_json().unwrap(),
            sample_checkpoint(4).to_json().unwrap()
        );
    }

    #[test]
    fn rejects_bad_version_and_shapes() {
        let mut ckpt = sample_checkpoint(5);
        ckpt.format_version = 99;
        assert!(Checkpoint::from_json(&ckpt.to_json().unwrap()).is_err());

        let mut ckpt = sample_checkpoint(5);
        ckpt.model.num_classes = 4;
        let json = serde_json::to_string(&ckpt).unwrap();
        assert!(Checkpoint::from_json(&json).is_err());
    }
}
