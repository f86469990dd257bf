//! End-to-end network: feature extractor, dual-stream stages, pixel-shuffle
//! upsampling and RGB head.

pub mod checkpoint;
pub mod config;
pub mod network;

pub use checkpoint::{Checkpoint, CheckpointHeader, TrainingMeta};
pub use config::{apply_ablation, ModelConfig};
pub use network::{count_parameters, CropGeometry, CropMode, FeatureExtractor, Model, ParamReport};
