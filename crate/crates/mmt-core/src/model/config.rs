//! Hyperparameters. Everything an experiment can vary lives here so an
//! ablation grid is just a list of config overlays.

use serde::{Deserialize, Serialize};

/// Which similarity measure scores a (teacher, student) representation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Similarity {
    L2,
    L1,
    Linf,
    Cosine,
    Kl,
}

/// Which representation pairs enter the distillation sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    /// Final convolutional activation plus the image space term only.
    Model,
    /// Every stage output.
    Block,
    /// Every recorded layer activation.
    Layer,
}

/// Teacher/student convolutional backbone family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CnnBackbone {
    /// Bottleneck blocks with projection shortcuts (default).
    Residual,
    /// Two plain 3x3 convolutions per stage, no shortcuts.
    Plain,
    /// A single convolution per stage.
    Shallow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub similarity: Similarity,
    pub granularity: Granularity,
    pub enable_irm: bool,
    pub enable_iam: bool,
    /// Replace both representation sums with the bare image-space term.
    pub image_space_only: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            similarity: Similarity::L2,
            granularity: Granularity::Model,
            enable_irm: true,
            enable_iam: true,
            image_space_only: false,
        }
    }
}

impl DistillConfig {
    pub fn kd_enabled(&self) -> bool {
        self.image_space_only || self.enable_irm || self.enable_iam
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared word-embedding / model width (d_w == d).
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// Square input image edge.
    pub image_size: usize,
    /// Per-stage channel widths of the teacher; the last entry is C_m.
    pub stage_channels: Vec<usize>,
    pub backbone: CnnBackbone,
    /// Per-channel standardization applied inside the teacher.
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    /// Feed the generated multimodal feature into the encoder. With this
    /// off the encoder sees only the text rows (the text-only baseline).
    pub use_multimodal: bool,
    /// Diagnostic variant: the encoder consumes only the multimodal
    /// rows, text features excluded.
    pub without_text_features: bool,
    /// Optional bias / nonlinearity on the generator projection.
    pub generator_bias: bool,
    pub generator_relu: bool,
    pub distill: DistillConfig,
    /// Parameter-initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            enc_layers: 4,
            dec_layers: 4,
            ffn: 128,
            max_len: 64,
            image_size: 32,
            stage_channels: vec![32, 64, 128],
            backbone: CnnBackbone::Residual,
            channel_mean: [0.5, 0.5, 0.5],
            channel_std: [0.5, 0.5, 0.5],
            use_multimodal: true,
            without_text_features: false,
            generator_bias: false,
            generator_relu: false,
            distill: DistillConfig::default(),
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Channel width C_m of the multimodal feature.
    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }

    /// Spatial edge p of the multimodal feature map; every stage halves
    /// the resolution once.
    pub fn feature_spatial(&self) -> usize {
        self.image_size >> self.stage_channels.len()
    }

    /// Region count P = p^2.
    pub fn feature_regions(&self) -> usize {
        self.feature_spatial() * self.feature_spatial()
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(crate::Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.stage_channels.is_empty() {
            return Err(crate::Error::config("need at least one CNN stage"));
        }
        if self.image_size % (1 << self.stage_channels.len()) != 0 {
            return Err(crate::Error::config(format!(
                "image size {} not divisible by 2^{} stages",
                self.image_size,
                self.stage_channels.len()
            )));
        }
        if self.feature_spatial() == 0 {
            return Err(crate::Error::config(
                "too many stages for this image size",
            ));
        }
        Ok(())
    }
}
