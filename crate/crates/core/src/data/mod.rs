//! Images, the ×4 degradation pipeline, quality metrics and synthetic
//! affine transforms.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod metrics;
pub mod resize;
pub mod synthetic;

pub use augment::{affine_augment, warp_affine, Affine, AugmentKind, FlowField, Level, LevelMagnitudes};
pub use dataset::{degrade, prepare_dataset, ImagePair, Manifest, PrepareOptions, RefPolicy};
pub use image::Image;
pub use metrics::{psnr, rgb_to_y, score, ssim, MetricOptions, Scores};
pub use resize::{bicubic_resize, cubic_kernel};
pub use synthetic::{synthetic_pairs, synthetic_texture};
