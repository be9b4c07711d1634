use serde::{Deserialize, Serialize};

use super::{ModelError, Vocab};

/// Positional encoding scheme. Only learned absolute embeddings over the
/// raster-ordered sequence are implemented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    LearnedAbsolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Width of one patch feature vector.
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub positional: PositionalKind,
    pub init_std: f64,
    /// Std of the query and key projections. Kept small so an untrained
    /// model attends almost uniformly.
    pub qk_init_std: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_h: 6,
            grid_w: 6,
            patch_dim: 16,
            vocab_size: Vocab::new().len(),
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            mlp_hidden: 128,
            max_seq_len: 48,
            positional: PositionalKind::LearnedAbsolute,
            init_std: 0.3,
            qk_init_std: 0.02,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Number of vision tokens.
    pub fn n_vision(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.patch_dim == 0 || self.mlp_hidden == 0 {
            return bad("layer count, patch width and MLP width must be positive".into());
        }
        if self.vocab_size != Vocab::new().len() {
            return bad(format!(
                "vocab_size {} does not match the fixed vocabulary ({})",
                self.vocab_size,
                Vocab::new().len()
            ));
        }
        if self.max_seq_len <= self.n_vision() + 1 {
            return bad(format!(
                "max_seq_len {} leaves no room for text after {} vision tokens",
                self.max_seq_len,
                self.n_vision()
            ));
        }
        if !(self.init_std > 0.0 && self.qk_init_std > 0.0 && self.norm_eps > 0.0) {
            return bad("init_std, qk_init_std and norm_eps must be positive".into());
        }
        Ok(())
    }
}
