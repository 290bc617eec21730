use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

/// Shape and initialization of the toy diffusion transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent channels per frame.
    pub latent_dim: usize,
    /// Padded sequence length every track is stored at.
    pub max_frames: usize,
    /// Length of the conditioning vector.
    pub cond_dim: usize,
    pub model_width: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Hidden width of the feed-forward sublayer.
    pub ff_hidden: usize,
    /// Number of tokens the conditioning vector is projected into for
    /// cross-attention.
    pub cond_tokens: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            max_frames: 64,
            cond_dim: 8,
            model_width: 32,
            num_blocks: 2,
            num_heads: 4,
            ff_hidden: 64,
            cond_tokens: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent_dim", self.latent_dim),
            ("max_frames", self.max_frames),
            ("cond_dim", self.cond_dim),
            ("model_width", self.model_width),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("ff_hidden", self.ff_hidden),
            ("cond_tokens", self.cond_tokens),
        ];
        for (name, v) in dims {
            if v == 0 {
                return arg_err(format!("{name} must be at least 1"));
            }
        }
        if self.model_width % self.num_heads != 0 {
            return arg_err(format!(
                "model_width {} is not divisible by num_heads {}",
                self.model_width, self.num_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_width / self.num_heads
    }
}
