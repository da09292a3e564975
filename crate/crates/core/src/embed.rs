//! Deterministic modality embedders.
//!
//! The model consumes three fixed-length vectors per sample: text, image and
//! geospatial. Each is produced by an implementation of the corresponding
//! trait, so a learned encoder can replace any default without the model
//! noticing. The defaults are:
//!
//! * [`HashingTextEmbedder`]: signed feature hashing of lowercase whitespace
//!   tokens, L2-normalized.
//! * [`PassthroughImageEmbedder`]: precomputed feature vectors, L2-normalized.
//! * [`SinusoidalGeoEmbedder`]: multi-frequency sin/cos encoding of latitude
//!   and longitude in radians.
//!
//! A missing modality always embeds to the zero vector.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{Ablation, SampleEmbeddings};
use crate::tensor::l2_normalize;

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

pub trait ImageEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, features: Option<&[f64]>) -> Result<Vec<f64>>;
}

pub trait GeoEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, coords: Option<(f64, f64)>) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEmbedConfig {
    pub dim_t: usize,
    pub hash_seed: u64,
}

impl Default for TextEmbedConfig {
    fn default() -> Self {
        Self {
            dim_t: 32,
            hash_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageEmbedConfig {
    pub dim_i: usize,
}

impl Default for ImageEmbedConfig {
    fn default() -> Self {
        Self { dim_i: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeoEmbedConfig {
    pub dim_g: usize,
    pub freq_base: f64,
}

impl Default for GeoEmbedConfig {
    fn default() -> Self {
        Self {
            dim_g: 16,
            freq_base: 10_000.0,
        }
    }
}

impl TextEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim_t == 0 {
            return Err(Error::config("dim_t must be at least 1"));
        }
        Ok(())
    }
}

impl ImageEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim_i == 0 {
            return Err(Error::config("dim_i must be at least 1"));
        }
        Ok(())
    }
}

impl GeoEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim_g == 0 || !self.dim_g.is_multiple_of(2) {
            return Err(Error::config(format!(
                "dim_g must be positive and even, got {}",
                self.dim_g
            )));
        }
        if !(self.freq_base > 1.0) {
            return Err(Error::config(format!(
                "freq_base must exceed 1, got {}",
                self.freq_base
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HashingTextEmbedder {
    pub cfg: TextEmbedConfig,
}

impl HashingTextEmbedder {
    pub fn new(cfg: TextEmbedConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

/// Seeded 64-bit FNV-1a with a splitmix finalizer. Stable across platforms
/// and toolchains, unlike `std`'s `DefaultHasher`.
fn token_hash(token: &str, seed: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

impl TextEmbedder for HashingTextEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim_t
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.cfg.dim_t];
        for token in text.split_whitespace() {
            let token = token.to_lowercase();
            let h = token_hash(&token, self.cfg.hash_seed);
            let bucket = (h % self.cfg.dim_t as u64) as usize;
            // top bit picks the sign, low bits the bucket
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            out[bucket] += sign;
        }
        l2_normalize(&mut out);
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PassthroughImageEmbedder {
    pub cfg: ImageEmbedConfig,
}

impl PassthroughImageEmbedder {
    pub fn new(cfg: ImageEmbedConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

impl ImageEmbedder for PassthroughImageEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim_i
    }

    fn embed(&self, features: Option<&[f64]>) -> Result<Vec<f64>> {
        let Some(features) = features else {
            return Ok(vec![0.0; self.cfg.dim_i]);
        };
        if features.len() != self.cfg.dim_i {
            return Err(Error::LengthMismatch {
                what: "image features",
                expected: self.cfg.dim_i,
                actual: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image features"));
        }
        let mut out = features.to_vec();
        l2_normalize(&mut out);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SinusoidalGeoEmbedder {
    pub cfg: GeoEmbedConfig,
}

impl SinusoidalGeoEmbedder {
    pub fn new(cfg: GeoEmbedConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Fills `out` with (sin, cos) pairs of `angle` at decreasing frequencies.
    /// An odd-length half ends with a lone sine.
    fn encode_axis(&self, angle: f64, out: &mut [f64]) {
        let d = self.cfg.dim_g as f64;
        for (j, slot) in out.iter_mut().enumerate() {
            let k = (j / 2) as f64;
            let freq = self.cfg.freq_base.powf(-2.0 * k / d);
            *slot = if j % 2 == 0 {
                (angle * freq).sin()
            } else {
                (angle * freq).cos()
            };
        }
    }
}

impl GeoEmbedder for SinusoidalGeoEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim_g
    }

    fn embed(&self, coords: Option<(f64, f64)>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.cfg.dim_g];
        let Some((lat, lon)) = coords else {
            return Ok(out);
        };
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::CoordinateOutOfRange {
                axis: "latitude",
                value: lat,
            });
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::CoordinateOutOfRange {
                axis: "longitude",
                value: lon,
            });
        }
        let half = self.cfg.dim_g / 2;
        let (lat_part, lon_part) = out.split_at_mut(half);
        self.encode_axis(lat.to_radians(), lat_part);
        self.encode_axis(lon.to_radians(), lon_part);
        Ok(out)
    }
}

/// The three default embedders, built from their configs.
#[derive(Debug, Clone, Copy)]
pub struct DefaultEmbedders {
    pub text: HashingTextEmbedder,
    pub image: PassthroughImageEmbedder,
    pub geo: SinusoidalGeoEmbedder,
}

impl DefaultEmbedders {
    pub fn new(text: TextEmbedConfig, image: ImageEmbedConfig, geo: GeoEmbedConfig) -> Result<Self> {
        Ok(Self {
            text: HashingTextEmbedder::new(text)?,
            image: PassthroughImageEmbedder::new(image)?,
            geo: SinusoidalGeoEmbedder::new(geo)?,
        })
    }
}

impl DefaultEmbedders {
    /// Embeds one sample as a `SampleEmbeddings` with one token per modality.
    pub fn embed_sample(&self, sample: &Sample) -> Result<SampleEmbeddings> {
        let text = self.text.embed(&sample.text);
        let image = self.image.embed(sample.image_features.as_deref())?;
        let geo = self.geo.embed(sample.coords)?;
        Ok(SampleEmbeddings::from_vectors(&text, &image, &geo))
    }

    pub fn embed_dataset(&self, dataset: &Dataset) -> Result<EmbeddedDataset> {
        let samples = dataset
            .samples
            .iter()
            .map(|s| self.embed_sample(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddedDataset {
            samples,
            labels: dataset.samples.iter().map(|s| s.label).collect(),
            num_classes: dataset.num_classes(),
        })
    }
}

/// A dataset after embedding: model-ready inputs plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedDataset {
    pub samples: Vec<SampleEmbeddings>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl EmbeddedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy with the selected modalities zeroed in every sample.
    pub fn ablate(&self, ablation: Ablation) -> EmbeddedDataset {
        EmbeddedDataset {
            samples: self.samples.iter().map(|s| s.ablate(ablation)).collect(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}
