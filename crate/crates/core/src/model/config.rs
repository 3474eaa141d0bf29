use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub conv_width: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub max_tokens: usize,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    pub label_count: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture bound to vocabulary and label sizes.
    pub fn new(vocab_size: usize, label_count: usize) -> Self {
        Self { vocab_size, label_count, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.attention_heads == 0 {
            return fail("embed_dim and attention_heads must be positive".into());
        }
        if self.embed_dim % self.attention_heads != 0 {
            return fail(format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.attention_heads));
        }
        if self.conv_width % 2 == 0 {
            return fail(format!("conv_width must be odd, got {}", self.conv_width));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.label_count == 0 {
            return fail("label_count must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return fail("vocabulary must hold at least <pad> and <unk>".into());
        }
        if self.ffn_dim == 0 || self.max_tokens == 0 {
            return fail("ffn_dim and max_tokens must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.attention_heads
    }

    /// Total number of learned scalars.
    pub fn parameter_count(&self) -> usize {
        let (v, d, w, f, l) = (self.vocab_size, self.embed_dim, self.conv_width, self.ffn_dim, self.label_count);
        let per_layer = 4 * (d * d + d) // q, k, v, output projections
            + (d * f + f) + (f * d + d) // feed-forward
            + 4 * d; // two layer norms
        v * d + (w * d * d + d) + self.encoder_layers * per_layer + 3 * d * d + (l * d + l)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            conv_width: 5,
            encoder_layers: 2,
            attention_heads: 4,
            ffn_dim: 128,
            max_tokens: 512,
            dropout_rate: 0.1,
            vocab_size: 2,
            label_count: 1,
            seed: 0,
        }
    }
}
