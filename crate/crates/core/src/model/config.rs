use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clamp on the learnable log temperature.
pub const LOGIT_SCALE_MAX: f64 = 4.605_170_185_988_092; // ln(100)

fn default_logit_scale_init() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Dimensions of the two-tower model. Sequence lengths include the class token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub blocks_per_tower: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub image_seq_len: usize,
    pub text_seq_len: usize,
    pub image_vocab: usize,
    pub text_vocab: usize,
    pub logit_scale_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            blocks_per_tower: 2,
            heads: 2,
            mlp_ratio: 4,
            image_seq_len: 17,
            text_seq_len: 9,
            image_vocab: 64,
            text_vocab: 64,
            logit_scale_init: default_logit_scale_init(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("blocks_per_tower", self.blocks_per_tower),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("image_vocab", self.image_vocab),
            ("text_vocab", self.text_vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.image_seq_len < 2 || self.text_seq_len < 2 {
            return Err(Error::Config(
                "model sequence lengths must hold a class token plus at least one token".into(),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.embed_dim ({}) must be divisible by model.heads ({})",
                self.embed_dim, self.heads
            )));
        }
        if !self.logit_scale_init.is_finite() {
            return Err(Error::Config("model.logit_scale_init must be finite".into()));
        }
        Ok(())
    }

    /// Image tokens per sample, excluding the class token.
    pub fn image_patches(&self) -> usize {
        self.image_seq_len - 1
    }

    /// Caption tokens per sample, excluding the class token.
    pub fn text_tokens(&self) -> usize {
        self.text_seq_len - 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}
