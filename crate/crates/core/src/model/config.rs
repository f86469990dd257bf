use serde::{Deserialize, Serialize};

use crate::attention::{builtin_gates, GatingLevel};
use crate::error::{ensure_arg, Result};

/// Architecture hyper-parameters. The embedding width is always
/// `96 · num_heads`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub blocks_per_stage: usize,
    pub num_heads: usize,
    pub window: usize,
    pub lr_input_size: usize,
    /// Width of the residual feature extractor.
    pub fe_channels: usize,
    pub fe_blocks: usize,
    pub mlp_ratio: usize,
    /// Kernel of the convolution feeding each pixel shuffle.
    pub upsample_kernel: usize,
    /// Gate strategy name (`full`, `frozen-gate`, `self-only`, `cross-only`).
    pub ablation: String,
    pub gating_level: GatingLevel,
    /// Add the bicubic upsampling of the input to the head output.
    pub global_skip: bool,
    /// Inference reference crop side as a multiple of the stage extent.
    pub ref_crop_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

pub const HEAD_WIDTH: usize = 96;

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            num_stages: 3,
            blocks_per_stage: 1,
            num_heads: 4,
            window: 8,
            lr_input_size: 40,
            fe_channels: 64,
            fe_blocks: 16,
            mlp_ratio: 4,
            upsample_kernel: 1,
            ablation: "full".into(),
            gating_level: GatingLevel::Output,
            global_skip: true,
            ref_crop_ratio: 4.8,
        }
    }

    /// Laptop-scale configuration: 16×16 inputs, two heads, one block per
    /// stage.
    pub fn desk() -> Self {
        Self {
            num_heads: 2,
            lr_input_size: 16,
            ..Self::paper()
        }
    }

    pub fn dim(&self) -> usize {
        HEAD_WIDTH * self.num_heads
    }

    pub fn scale(&self) -> usize {
        1 << (self.num_stages - 1)
    }

    pub fn stage_extent(&self, stage: usize) -> usize {
        self.lr_input_size << stage
    }

    pub fn output_extent(&self) -> usize {
        self.lr_input_size * self.scale()
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.num_stages == 3,
            "the x4 cascade needs exactly 3 stages, got {}",
            self.num_stages
        );
        ensure_arg!(self.num_heads > 0, "num_heads must be positive");
        ensure_arg!(self.blocks_per_stage > 0, "blocks_per_stage must be positive");
        ensure_arg!(self.window > 0, "window must be positive");
        ensure_arg!(self.fe_channels > 0, "fe_channels must be positive");
        ensure_arg!(self.mlp_ratio > 0, "mlp_ratio must be positive");
        ensure_arg!(
            self.upsample_kernel % 2 == 1,
            "upsample_kernel must be odd, got {}",
            self.upsample_kernel
        );
        ensure_arg!(
            self.ref_crop_ratio >= 1.0,
            "ref_crop_ratio must be at least 1, got {}",
            self.ref_crop_ratio
        );
        for s in 0..self.num_stages {
            let e = self.stage_extent(s);
            ensure_arg!(
                e % self.window == 0,
                "stage {s} extent {e} is not divisible by window {}",
                self.window
            );
        }
        builtin_gates().get(&self.ablation)?;
        Ok(())
    }
}

/// Returns `cfg` switched to the named ablation mode.
pub fn apply_ablation(cfg: &ModelConfig, mode: &str) -> Result<ModelConfig> {
    builtin_gates().get(mode)?;
    Ok(ModelConfig {
        ablation: mode.to_string(),
        ..cfg.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_extents() {
        let c = ModelConfig::paper();
        assert_eq!(c.dim(), 384);
        assert_eq!(c.output_extent(), 160);
        assert_eq!((0..3).map(|s| c.stage_extent(s)).collect::<Vec<_>>(), vec![40, 80, 160]);
        let d = ModelConfig::desk();
        assert_eq!(d.dim(), 192);
        assert_eq!(d.output_extent(), 64);
        c.validate().unwrap();
        d.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_extents_and_modes() {
        let c = ModelConfig {
            lr_input_size: 12,
            ..ModelConfig::desk()
        };
        assert!(c.validate().is_err());
        assert!(apply_ablation(&ModelConfig::desk(), "none").is_err());
        assert_eq!(apply_ablation(&ModelConfig::desk(), "self-only").unwrap().ablation, "self-only");
    }

    #[test]
    fn toml_round_trip() {
        let c = ModelConfig::desk();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), c);
        assert!(toml::from_str::<ModelConfig>("bogus = 1").is_err());
    }
}
