//! Multimodal samples, the line-delimited dataset format, stratified
//! splitting and a class-separable synthetic generator.
//!
//! # File format
//!
//! A dataset file is JSON Lines. The first line is a header, every further
//! line one sample:
//!
//! ```text
//! {"format_version":1,"class_names":["fire","flood"],"image_dim":4}
//! {"id":"a1","text":"smoke over the hills","image_features":[0.1,0.2,0.3,0.4],"lat":28.6,"lon":77.2,"label":"fire"}
//! {"id":"a2","text":"river breached","label":"flood"}
//! ```
//!
//! `image_features`, `lat` and `lon` may be omitted (or `null`); `lat` and
//! `lon` must appear together. Labels are class names from the header.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub image_features: Option<Vec<f64>>,
    /// `(lat, lon)` in degrees.
    pub coords: Option<(f64, f64)>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub image_dim: usize,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    class_names: Vec<String>,
    image_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    label: String,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Count of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Checks class names, labels, image dims and coordinate ranges.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::config(format!("duplicate class name {name:?}")));
            }
        }
        for s in &self.samples {
            validate_sample(s, self.num_classes(), self.image_dim)?;
        }
        Ok(())
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            image_dim: self.image_dim,
            samples,
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            format_version: DATASET_FORMAT_VERSION,
            class_names: self.class_names.clone(),
            image_dim: self.image_dim,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for s in &self.samples {
            let record = Record {
                id: s.id.clone(),
                text: s.text.clone(),
                image_features: s.image_features.clone(),
                lat: s.coords.map(|c| c.0),
                lon: s.coords.map(|c| c.1),
                label: self.class_names[s.label].clone(),
            };
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let body = self.to_jsonl()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file), path)
    }

    /// Parses the JSONL format; `origin` is used only in error messages.
    pub fn read(reader: impl BufRead, origin: &Path) -> Result<Dataset> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = reader.lines().enumerate();
        let header: Header = loop {
            match lines.next() {
                None => return Err(parse_err(1, "missing header line".into())),
                Some((i, line)) => {
                    let line = line.map_err(|e| Error::io(origin, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| parse_err(i + 1, format!("bad header: {e}")))?;
                }
            }
        };
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(parse_err(
                1,
                format!("unsupported format version {}", header.format_version),
            ));
        }
        let mut dataset = Dataset {
            class_names: header.class_names,
            image_dim: header.image_dim,
            samples: Vec::new(),
        };
        dataset.validate().map_err(|e| parse_err(1, e.to_string()))?;

        for (i, line) in lines {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
            let label = dataset
                .class_names
                .iter()
                .position(|n| *n == rec.label)
                .ok_or_else(|| parse_err(line_no, format!("unknown label {:?}", rec.label)))?;
            let coords = match (rec.lat, rec.lon) {
                (Some(lat), Some(lon)) => Some((lat, lon)),
                (None, None) => None,
                _ => return Err(parse_err(line_no, "lat and lon must be given together".into())),
            };
            let sample = Sample {
                id: rec.id,
                text: rec.text,
                image_features: rec.image_features,
                coords,
                label,
            };
            validate_sample(&sample, dataset.num_classes(), dataset.image_dim)
                .map_err(|e| parse_err(line_no, e.to_string()))?;
            dataset.samples.push(sample);
        }
        Ok(dataset)
    }
}

fn validate_sample(s: &Sample, num_classes: usize, image_dim: usize) -> Result<()> {
    if s.label >= num_classes {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            num_classes,
        });
    }
    if let Some(f) = &s.image_features {
        if f.len() != image_dim {
            return Err(Error::LengthMismatch {
                what: "image_features",
                expected: image_dim,
                actual: f.len(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image_features"));
        }
    }
    if let Some((lat, lon)) = s.coords {
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
    }
    Ok(())
}

/// Train/validation/test fractions.
pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.2, 0.1];

/// Stratified three-way split. Within each class the samples are shuffled
/// with a seeded stream, then `floor(n*val)` go to validation, `floor(n*test)`
/// to test and the rest to train. Each part keeps the original sample order.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let mut part_of = vec![0u8; dataset.len()];
    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        Rng::derived(seed, class as u64).shuffle(&mut members);
        let n = members.len() as f64;
        let n_val = (n * fractions[1]).floor() as usize;
        let n_test = (n * fractions[2]).floor() as usize;
        for &i in &members[..n_val] {
            part_of[i] = 1;
        }
        for &i in &members[n_val..n_val + n_test] {
            part_of[i] = 2;
        }
    }
    let pick = |part: u8| {
        dataset.with_samples(
            dataset
                .samples
                .iter()
                .zip(&part_of)
                .filter(|(_, &p)| p == part)
                .map(|(s, _)| s.clone())
                .collect(),
        )
    };
    Ok((pick(0), pick(1), pick(2)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Class-exclusive vocabulary size.
    pub vocab_per_class: usize,
    /// Vocabulary shared by every class (the noise tokens).
    pub shared_vocab: usize,
    pub tokens_per_sample: usize,
    /// Per-class `(lat, lon)` centers; generated when absent.
    pub geo_centers: Option<Vec<(f64, f64)>>,
    /// Standard deviation of coordinates around the class center, degrees.
    pub geo_spread: f64,
    pub image_dim: usize,
    /// Pairwise distance between class image means.
    pub image_center_distance: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            samples_per_class: 20,
            vocab_per_class: 12,
            shared_vocab: 24,
            tokens_per_sample: 8,
            geo_centers: None,
            geo_spread: 2.0,
            image_dim: 32,
            image_center_distance: 4.0,
            noise_level: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be at least 1"));
        }
        if self.vocab_per_class == 0 || self.shared_vocab == 0 || self.tokens_per_sample == 0 {
            return Err(Error::config(
                "vocabulary sizes and tokens_per_sample must be at least 1",
            ));
        }
        if self.image_dim == 0 {
            return Err(Error::config("image_dim must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::config(format!(
                "noise_level must be in [0, 1], got {}",
                self.noise_level
            )));
        }
        if !(self.geo_spread >= 0.0) || !(self.image_center_distance > 0.0) {
            return Err(Error::config("geo_spread must be >= 0 and image_center_distance > 0"));
        }
        if let Some(centers) = &self.geo_centers {
            if centers.len() != self.num_classes {
                return Err(Error::config("geo_centers must have one entry per class"));
            }
            for &(lat, lon) in centers {
                if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                    return Err(Error::config(format!("geo center ({lat}, {lon}) out of range")));
                }
            }
        }
        Ok(())
    }
}

const DISASTER_NAMES: [&str; 12] = [
    "fire",
    "flood",
    "earthquake",
    "hurricane",
    "landslide",
    "tsunami",
    "drought",
    "storm",
    "wildfire",
    "cyclone",
    "avalanche",
    "eruption",
];

pub fn synth_class_name(c: usize) -> String {
    DISASTER_NAMES
        .get(c)
        .map_or_else(|| format!("class_{c}"), |s| s.to_string())
}

fn default_centers(num_classes: usize) -> Vec<(f64, f64)> {
    (0..num_classes)
        .map(|c| {
            let frac = (c as f64 + 0.5) / num_classes as f64;
            let lat = 45.0 * (std::f64::consts::TAU * frac).sin();
            let lon = -180.0 + 360.0 * frac;
            (lat, lon)
        })
        .collect()
}

/// Class means `image_center_distance` apart: scaled axis vectors when there
/// are enough dimensions, random directions otherwise.
fn image_means(cfg: &SynthConfig, rng: &mut Rng) -> Vec<Vec<f64>> {
    let radius = cfg.image_center_distance / std::f64::consts::SQRT_2;
    (0..cfg.num_classes)
        .map(|c| {
            if cfg.num_classes <= cfg.image_dim {
                let mut v = vec![0.0; cfg.image_dim];
                v[c] = radius;
                v
            } else {
                let mut v: Vec<f64> = (0..cfg.image_dim).map(|_| rng.normal()).collect();
                crate::tensor::l2_normalize(&mut v);
                v.iter_mut().for_each(|x| *x *= radius);
                v
            }
        })
        .collect()
}

/// Generates a dataset whose class signal is present in all three
/// modalities. Samples are interleaved by class.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let class_names: Vec<String> = (0..cfg.num_classes).map(synth_class_name).collect();
    let centers = cfg
        .geo_centers
        .clone()
        .unwrap_or_else(|| default_centers(cfg.num_classes));
    let means = image_means(cfg, &mut rng);

    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class);
    for i in 0..cfg.samples_per_class {
        for (c, name) in class_names.iter().enumerate() {
            let tokens: Vec<String> = (0..cfg.tokens_per_sample)
                .map(|_| {
                    if rng.bernoulli(cfg.noise_level) {
                        format!("common_{}", rng.below(cfg.shared_vocab))
                    } else {
                        format!("{name}_{}", rng.below(cfg.vocab_per_class))
                    }
                })
                .collect();
            let image: Vec<f64> = means[c].iter().map(|m| m + cfg.noise_level * rng.normal()).collect();
            let (lat0, lon0) = centers[c];
            let lat = (lat0 + cfg.geo_spread * rng.normal()).clamp(-90.0, 90.0);
            let lon = (lon0 + cfg.geo_spread * rng.normal()).clamp(-180.0, 180.0);
            samples.push(Sample {
                id: format!("syn-{c}-{i:05}"),
                text: tokens.join(" "),
                image_features: Some(image),
                coords: Some((lat, lon)),
                label: c,
            });
        }
    }
    Ok(Dataset {
        class_names,
        image_dim: cfg.image_dim,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> Dataset {
        Dataset {
            class_names: vec!["fire".into(), "flood".into()],
            image_dim: 2,
            samples: vec![
                Sample {
                    id: "a".into(),
                    text: "smoke \"quoted\" ✓".into(),
                    image_features: Some(vec![0.1, -3.0e-17]),
                    coords: Some((28.61, 77.21)),
                    label: 0,
                },
                Sample {
                    id: "b".into(),
                    text: String::new(),
                    image_features: None,
                    coords: None,
                    label: 1,
                },
            ],
        }
    }

    fn read_str(s: &str) -> Result<Dataset> {
        Dataset::read(s.as_bytes(), Path::new("mem.jsonl"))
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let d = tiny();
        d.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), d);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let d = Dataset {
            class_names: vec!["a".into(), "b".into()],
            image_dim: 3,
            samples: vec![],
        };
        assert_eq!(read_str(&d.to_jsonl().unwrap()).unwrap(), d);
    }

    #[test]
    fn unknown_label_names_line() {
        let text = "{\"format_version\":1,\"class_names\":[\"fire\"],\"image_dim\":1}\n\
                    {\"id\":\"x\",\"text\":\"t\",\"label\":\"fire\"}\n\
                    {\"id\":\"y\",\"text\":\"t\",\"label\":\"flood\"}\n";
        match read_str(text) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("flood"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_image_dim_rejected() {
        let text = "{\"format_version\":1,\"class_names\":[\"fire\"],\"image_dim\":2}\n\
                    {\"id\":\"x\",\"text\":\"\",\"image_features\":[1.0],\"label\":\"fire\"}\n";
        assert!(matches!(read_str(text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(matches!(read_str(""), Err(Error::Parse { line: 1, .. })));
        let text = "{\"format_version\":1,\"class_names\":[\"a\"],\"image_dim\":1}\n{not json\n";
        assert!(matches!(read_str(text), Err(Error::Parse { line: 2, .. })));
        let half = "{\"format_version\":1,\"class_names\":[\"a\"],\"image_dim\":1}\n\
                    {\"id\":\"x\",\"text\":\"\",\"lat\":1.0,\"label\":\"a\"}\n";
        assert!(matches!(read_str(half), Err(Error::Parse { line: 2, .. })));
        let dup = "{\"format_version\":1,\"class_names\":[\"a\",\"a\"],\"image_dim\":1}\n";
        assert!(read_str(dup).is_err());
    }

    fn one_class(n: usize) -> Dataset {
        Dataset {
            class_names: vec!["only".into()],
            image_dim: 1,
            samples: (0..n)
                .map(|i| Sample {
                    id: format!("s{i}"),
                    text: String::new(),
                    image_features: None,
                    coords: None,
                    label: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn split_hundred_is_70_20_10() {
        let (tr, va, te) = split(&one_class(100), DEFAULT_SPLIT, 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (70, 20, 10));
    }

    #[test]
    fn split_is_deterministic() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        assert_eq!(
            split(&d, DEFAULT_SPLIT, 4).unwrap(),
            split(&d, DEFAULT_SPLIT, 4).unwrap()
        );
        assert_ne!(
            split(&d, DEFAULT_SPLIT, 4).unwrap().1,
            split(&d, DEFAULT_SPLIT, 5).unwrap().1
        );
    }

    #[test]
    fn split_preserves_balance() {
        let d = synth_generate(&SynthConfig {
            num_classes: 2,
            samples_per_class: 50,
            ..Default::default()
        })
        .unwrap();
        let (tr, va, te) = split(&d, DEFAULT_SPLIT, 8).unwrap();
        for part in [&tr, &va, &te] {
            let c = part.class_counts();
            assert!(c[0].abs_diff(c[1]) <= 1, "{c:?}");
        }
    }

    #[test]
    fn tiny_class_goes_to_train() {
        let (tr, va, te) = split(&one_class(2), DEFAULT_SPLIT, 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (2, 0, 0));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(split(&one_class(5), [0.5, 0.5, 0.0], 0).is_err());
        assert!(split(&one_class(5), [0.5, 0.3, 0.1], 0).is_err());
    }

    #[test]
    fn synth_noise_free_text_is_class_exclusive() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        for s in &d.samples {
            let prefix = format!("{}_", d.class_names[s.label]);
            assert!(s.text.split_whitespace().all(|t| t.starts_with(&prefix)), "{}", s.text);
        }
    }

    #[test]
    fn synth_seed_determinism() {
        let a = synth_generate(&SynthConfig {
            seed: 1,
            noise_level: 0.3,
            ..Default::default()
        })
        .unwrap();
        let b = synth_generate(&SynthConfig {
            seed: 1,
            noise_level: 0.3,
            ..Default::default()
        })
        .unwrap();
        let c = synth_generate(&SynthConfig {
            seed: 2,
            noise_level: 0.3,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synth_noise_free_images_are_centroid_separable() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        let c = d.num_classes();
        let mut centroids = vec![vec![0.0; d.image_dim]; c];
        let counts = d.class_counts();
        for s in &d.samples {
            for (acc, v) in centroids[s.label].iter_mut().zip(s.image_features.as_ref().unwrap()) {
                *acc += v / counts[s.label] as f64;
            }
        }
        let correct = d
            .samples
            .iter()
            .filter(|s| {
                let f = s.image_features.as_ref().unwrap();
                let nearest = (0..c)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                nearest == s.label
            })
            .count();
        assert_eq!(correct, d.len());
    }

    #[test]
    fn synth_config_validation() {
        assert!(synth_generate(&SynthConfig {
            num_classes: 1,
            ..Default::default()
        })
        .is_err());
        assert!(synth_generate(&SynthConfig {
            samples_per_class: 0,
            ..Default::default()
        })
        .is_err());
        assert!(synth_generate(&SynthConfig {
            noise_level: 1.5,
            ..Default::default()
        })
        .is_err());
        assert!(synth_generate(&SynthConfig {
            geo_centers: Some(vec![(0.0, 0.0)]),
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn synth_many_classes_uses_random_directions() {
        let d = synth_generate(&SynthConfig {
            num_classes: 12,
            image_dim: 4,
            samples_per_class: 2,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(d.class_counts(), vec![2; 12]);
        assert_eq!(d.class_names[11], "eruption");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn synth_invariants(
            classes in 2usize..6,
            per_class in 1usize..12,
            noise in 0.0f64..1.0,
            spread in 0.0f64..80.0,
            seed in any::<u64>(),
        ) {
            let cfg = SynthConfig {
                num_classes: classes,
                samples_per_class: per_class,
                noise_level: noise,
                geo_spread: spread,
                image_dim: 5,
                seed,
                ..Default::default()
            };
            let d = synth_generate(&cfg).unwrap();
            prop_assert_eq!(d.class_counts(), vec![per_class; classes]);
            d.validate().unwrap();
            let back = Dataset::read(d.to_jsonl().unwrap().as_bytes(), Path::new("p")).unwrap();
            prop_assert_eq!(&back, &d);

            let (tr, va, te) = split(&d, DEFAULT_SPLIT, seed).unwrap();
            prop_assert_eq!(tr.len() + va.len() + te.len(), d.len());
            let mut ids: Vec<&str> = tr.samples.iter().chain(&va.samples).chain(&te.samples).map(|s| s.id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), d.len());
        }
    }
}
