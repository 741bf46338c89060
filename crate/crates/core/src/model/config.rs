use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Tokenizer;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub patch_feature_dim: usize,
    /// Side length of the 2-D grid position tables.
    pub max_grid: usize,
    pub k_latent: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: Tokenizer::standard().len(),
            max_seq: 512,
            patch_feature_dim: 10,
            max_grid: 6,
            k_latent: 4,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Default sizes with `d_model` (and `d_ff = 4 d_model`) replaced.
    pub fn with_width(d_model: usize) -> Self {
        ModelConfig { d_model, d_ff: 4 * d_model, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("patch_feature_dim", self.patch_feature_dim),
            ("max_grid", self.max_grid),
            ("k_latent", self.k_latent),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config("n_heads", format!("{} does not divide d_model {}", self.n_heads, self.d_model)));
        }
        Ok(())
    }
}
