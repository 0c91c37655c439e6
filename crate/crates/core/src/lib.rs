//! Semi-supervised semantic segmentation with confidence-gated pseudo-labels
//! and weak/strong augmentation consistency.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pseudolabel;
pub mod rng;
pub mod sweep;
pub mod trainer;
pub mod types;

pub use checkpoint::Checkpoint;
pub use config::{validate_config, TrainConfig};
pub use data::{DatasetSpec, MixedBatch, Pools};
pub use error::{Error, Result};
pub use metrics::{dice_score, MetricsReport};
pub use model::{Model, ModelSpec};
pub use trainer::{evaluate, fit, train_step, StepReport, TrainMode, TrainResult};
pub use types::{Image, LabeledSample, MaskMap, ProbMap, PseudoLabel, UnlabeledSample};
