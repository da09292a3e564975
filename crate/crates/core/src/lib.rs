//! Multimodal disaster classification from scratch.
//!
//! Text, image features and coordinates are embedded by deterministic
//! embedders ([`embed`]), fused into one token per modality, combined by
//! text-queried cross-modal attention, passed through a sigmoid gate and
//! classified with a softmax head ([`model`]). Training uses hand-written
//! backpropagation and Adam with decoupled weight decay ([`trainer`]);
//! [`metrics`] covers accuracy, macro precision/recall/F1, one-vs-rest AUC
//! and MAE/RMSE.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, RunPaths};
pub use data::{split, synth_generate, Dataset, Sample, SynthConfig};
pub use embed::{DefaultEmbedders, EmbeddedDataset, GeoEmbedConfig, ImageEmbedConfig, TextEmbedConfig};
pub use error::{Error, Result};
pub use metrics::{evaluate, EvalReport};
pub use model::{forward, Ablation, ForwardTrace, Mode, ModelConfig, ModelParams, ParamName, SampleEmbeddings};
pub use rng::Rng;
pub use tensor::Matrix;
pub use trainer::{adam_step, backward, train, AdamState, EpochRecord, Gradients, TrainConfig};
