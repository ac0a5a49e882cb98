use serde::{Deserialize, Serialize};

use crate::error::{PaeError, Result};

fn default_ln_eps() -> f64 {
    1e-5
}

/// Architecture hyperparameters. Derived sizes (patch length, token count,
/// head width, FFN width) are methods so a serialized config cannot carry
/// inconsistent copies of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Monitoring channels per window (l).
    pub channels: usize,
    /// Samples per channel (p).
    pub samples: usize,
    /// Patches cut from each channel (m).
    pub patches_per_channel: usize,
    pub latent_dim: usize,
    pub depth_enc: usize,
    pub depth_dec: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    pub lstm_hidden: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 38,
            samples: 200,
            patches_per_channel: 5,
            latent_dim: 128,
            depth_enc: 4,
            depth_dec: 4,
            heads: 4,
            mlp_ratio: 0.8,
            dropout: 0.1,
            lstm_hidden: 128,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for exhaustive gradient checks.
    pub fn toy() -> Self {
        Self {
            channels: 2,
            samples: 20,
            patches_per_channel: 2,
            latent_dim: 8,
            depth_enc: 2,
            depth_dec: 2,
            heads: 2,
            mlp_ratio: 0.8,
            dropout: 0.1,
            lstm_hidden: 8,
            layer_norm_eps: 1e-5,
        }
    }

    /// Patch length D = p / m.
    pub fn patch_len(&self) -> usize {
        self.samples / self.patches_per_channel
    }

    /// Patch tokens N = l · m (class token excluded).
    pub fn tokens(&self) -> usize {
        self.channels * self.patches_per_channel
    }

    pub fn head_dim(&self) -> usize {
        self.patch_len() / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        ((self.mlp_ratio * self.patch_len() as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("samples", self.samples),
            ("patches_per_channel", self.patches_per_channel),
            ("latent_dim", self.latent_dim),
            ("heads", self.heads),
            ("lstm_hidden", self.lstm_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PaeError::Parameter(format!("model.{name} must be positive")));
            }
        }
        if self.samples % self.patches_per_channel != 0 {
            return Err(PaeError::Parameter(format!(
                "model.samples ({}) must be divisible by model.patches_per_channel ({})",
                self.samples, self.patches_per_channel
            )));
        }
        if self.patch_len() % self.heads != 0 {
            return Err(PaeError::Parameter(format!(
                "patch length {} must be divisible by model.heads ({})",
                self.patch_len(),
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PaeError::Parameter(format!("model.dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(PaeError::Parameter("model.mlp_ratio must be positive".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(PaeError::Parameter("model.layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    fn block_params(&self) -> usize {
        let (d, f) = (self.patch_len(), self.ffn_hidden());
        // two LN pairs, qkv, output projection, FFN
        4 * d + 3 * d * d + d * d + d * f + f + f * d + d
    }

    /// Closed-form parameter count of the full model.
    pub fn parameter_count(&self) -> usize {
        let (n, d, h, l) = (self.tokens(), self.patch_len(), self.lstm_hidden, self.latent_dim);
        let embed = (n + 1) * d + d;
        let lstm = 4 * h * (d + h + 2);
        let head = (h * l + l) + 2 * (l * l + l);
        let expand = l * n * d + n * d;
        embed + (self.depth_enc + self.depth_dec) * self.block_params() + lstm + head + expand
    }
}
