//! Architecture configuration.

use serde::{Deserialize, Serialize};

use crate::error::{DbatError, Result};

pub const NUM_STAGES: usize = 4;
/// Input-pixel stride of each encoder stage output.
pub const STAGE_STRIDES: [usize; NUM_STAGES] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depths: [usize; NUM_STAGES],
    pub heads: [usize; NUM_STAGES],
    pub window_size: usize,
    pub mlp_ratio: usize,
    /// Shift windows by half a window in every odd block of a stage.
    pub shifted_windows: bool,
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            window_size: 4,
            mlp_ratio: 4,
            shifted_windows: false,
            input_channels: 3,
        }
    }
}

impl EncoderConfig {
    /// Swin-T: dim 96, depths [2, 2, 6, 2], window 7.
    pub fn swin_tiny() -> Self {
        Self {
            embed_dim: 96,
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4,
            shifted_windows: true,
            input_channels: 3,
        }
    }

    /// Channel count of stage `i` (0-based).
    pub fn channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Window side used at a stage of the given spatial size: the configured
    /// window, clamped to the feature map when the map is smaller.
    pub fn effective_window(&self, h: usize, w: usize) -> usize {
        self.window_size.min(h).min(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return Err(DbatError::Config("embed_dim, window_size and mlp_ratio must be positive".into()));
        }
        if self.input_channels != 3 {
            return Err(DbatError::Config(format!("input_channels must be 3, got {}", self.input_channels)));
        }
        for s in 0..NUM_STAGES {
            if self.depths[s] == 0 {
                return Err(DbatError::Config(format!("stage {} has depth 0", s + 1)));
            }
            let c = self.channels(s);
            if self.heads[s] == 0 || c % self.heads[s] != 0 {
                return Err(DbatError::Config(format!(
                    "stage {} heads {} do not divide {c} channels",
                    s + 1,
                    self.heads[s]
                )));
            }
        }
        Ok(())
    }

    /// Check that an `h × w` input tiles cleanly at every stage.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(DbatError::Config(format!("input {h}x{w} must be a positive multiple of 32")));
        }
        for (s, stride) in STAGE_STRIDES.iter().enumerate() {
            let (hs, ws) = (h / stride, w / stride);
            let win = self.effective_window(hs, ws);
            if hs % win != 0 || ws % win != 0 {
                return Err(DbatError::Config(format!(
                    "stage {} map {hs}x{ws} is not divisible by window {win}",
                    s + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPredictor {
    #[default]
    Conv1x1,
    DilatedConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsampler {
    #[default]
    Mlp,
    AveragePool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbaConfig {
    pub mask_predictor: MaskPredictor,
    pub downsampler: Downsampler,
    pub dilation: usize,
}

impl Default for DbaConfig {
    fn default() -> Self {
        Self {
            mask_predictor: MaskPredictor::Conv1x1,
            downsampler: Downsampler::Mlp,
            dilation: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    #[default]
    Attention,
    PlainResidual,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    pub mode: MergeMode,
}

/// Component removal switches for ablation runs.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Skip the attention aggregation; the merge module receives Map₄ as its
    /// second input.
    pub disable_dba: bool,
    /// Skip feature merging; the decoder receives the aggregated feature (or
    /// Map₄ when the aggregation is disabled too).
    pub disable_merge: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dba: DbaConfig,
    pub merge: MergeConfig,
    pub ablation: Ablation,
    pub num_classes: usize,
    pub fpn_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            dba: DbaConfig::default(),
            merge: MergeConfig::default(),
            ablation: Ablation::default(),
            num_classes: 4,
            fpn_width: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(DbatError::Config(format!("num_classes {} outside 2..=255", self.num_classes)));
        }
        if self.fpn_width == 0 {
            return Err(DbatError::Config("fpn_width must be positive".into()));
        }
        if self.dba.dilation == 0 {
            return Err(DbatError::Config("dba.dilation must be positive".into()));
        }
        Ok(())
    }
}
