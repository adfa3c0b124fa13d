use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which temporal module the translator stacks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Plain 3×3 conv → norm → SiLU blocks in place of attention.
    ConvBaseline,
    /// Spatial attention replaced by ones.
    NoSa,
    /// Channel gate replaced by ones.
    NoDa,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::ConvBaseline, Ablation::NoSa, Ablation::NoDa];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::ConvBaseline => "conv_baseline",
            Ablation::NoSa => "no_sa",
            Ablation::NoDa => "no_da",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub frames_in: usize,
    pub frames_out: usize,
    /// Encoder/decoder width `C_s`.
    pub hidden_spatial: usize,
    /// Per-frame translator width `C′`; blocks run on `T·C′` channels.
    pub hidden_temporal: usize,
    pub num_tau_blocks: usize,
    pub dw_kernel: usize,
    pub dwd_kernel: usize,
    pub dwd_dilation: usize,
    pub se_reduction: usize,
    /// Spatial reduction of the encoder: 1, 2 or 4.
    pub downsample_factor: usize,
    pub ablation: Ablation,
    /// Requested group count; each norm uses `gcd(norm_groups, channels)`.
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            frames_in: 10,
            frames_out: 10,
            hidden_spatial: 32,
            hidden_temporal: 64,
            num_tau_blocks: 4,
            dw_kernel: 5,
            dwd_kernel: 7,
            dwd_dilation: 3,
            se_reduction: 4,
            downsample_factor: 4,
            ablation: Ablation::Full,
            norm_groups: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("frames_in", self.frames_in),
            ("frames_out", self.frames_out),
            ("hidden_spatial", self.hidden_spatial),
            ("hidden_temporal", self.hidden_temporal),
            ("num_tau_blocks", self.num_tau_blocks),
            ("dwd_dilation", self.dwd_dilation),
            ("se_reduction", self.se_reduction),
            ("norm_groups", self.norm_groups),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.frames_in != self.frames_out {
            return fail(format!(
                "frames_in ({}) must equal frames_out ({}); use recursive prediction for longer horizons",
                self.frames_in, self.frames_out
            ));
        }
        for (name, k) in [("dw_kernel", self.dw_kernel), ("dwd_kernel", self.dwd_kernel)] {
            if k % 2 == 0 {
                return fail(format!("{name} must be odd, got {k}"));
            }
        }
        if ![1, 2, 4].contains(&self.downsample_factor) {
            return fail(format!("downsample_factor must be 1, 2 or 4, got {}", self.downsample_factor));
        }
        Ok(())
    }

    /// Strides of the four encoder layers; the decoder mirrors them.
    pub fn encoder_strides(&self) -> [usize; 4] {
        match self.downsample_factor {
            1 => [1, 1, 1, 1],
            2 => [1, 2, 1, 1],
            _ => [1, 2, 1, 2],
        }
    }

    /// Width of the channel-gate bottleneck.
    pub fn bottleneck(&self) -> usize {
        (self.frames_in * self.hidden_temporal / self.se_reduction).max(1)
    }

    /// Extent covered by one spatial-attention path: `dw + (dwd − 1)·dilation`.
    pub fn receptive_field(&self) -> usize {
        self.dw_kernel + (self.dwd_kernel - 1) * self.dwd_dilation
    }
}
