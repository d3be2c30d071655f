// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{CloomError, Result};

/// Architecture of the toy vision-language model.
///
/// The vision tower sees one token per pixel cell of the `patch_grid`, mean
/// pools `pool_block × pool_block` blocks into `n_image_tokens` soft tokens,
/// and projects them to `d_model` before they are prepended to the text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_encoder_layers: usize,
    pub patch_grid: (usize, usize),
    pub n_image_tokens: usize,
    pub pool_block: usize,
    pub d_vision: usize,
    pub n_vision_heads: usize,
    pub d_vision_mlp: usize,
    pub max_text_len: usize,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_decoder_layers: 4,
            n_heads: 4,
            d_mlp: 256,
            vocab_size: 64,
            n_encoder_layers: 2,
            patch_grid: (12, 12),
            n_image_tokens: 36,
            pool_block: 2,
            d_vision: 32,
            n_vision_heads: 2,
            d_vision_mlp: 64,
            max_text_len: 8,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CloomError::InvalidArgument(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_vision == 0 || self.n_vision_heads == 0 || self.d_vision % self.n_vision_heads != 0 {
            return bad(format!(
                "d_vision {} must be a positive multiple of n_vision_heads {}",
                self.d_vision, self.n_vision_heads
            ));
        }
        let (gh, gw) = self.patch_grid;
        let b = self.pool_block;
        if b == 0 || gh % b != 0 || gw % b != 0 {
            return bad(format!("patch grid {gh}x{gw} not divisible by pooling block {b}"));
        }
        if self.n_image_tokens != (gh / b) * (gw / b) {
            return bad(format!(
                "n_image_tokens {} != ({gh}/{b}) x ({gw}/{b})",
                self.n_image_tokens
            ));
        }
        if self.n_decoder_layers == 0 {
            return bad("need at least one decoder layer".into());
        }
        if self.vocab_size < crate::vlm::vocab::MIN_VOCAB {
            return bad(format!(
                "vocab_size {} smaller than the fixed symbol table ({})",
                self.vocab_size,
                crate::vlm::vocab::MIN_VOCAB
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn vision_head_dim(&self) -> usize {
        self.d_vision / self.n_vision_heads
    }

    pub fn n_patches(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    /// Pooled grid `(g_h / b, g_w / b)`.
    pub fn pooled_grid(&self) -> (usize, usize) {
        (
            self.patch_grid.0 / self.pool_block,
            self.patch_grid.1 / self.pool_block,
        )
    }

    pub fn max_seq_len(&self) -> usize {
        self.n_image_tokens + self.max_text_len
    }
}
