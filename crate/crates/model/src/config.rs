use serde::{Deserialize, Serialize};

/// Block layout of the Transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// RMSNorm, rotary positions, SwiGLU, no biases.
    Modern,
    /// LayerNorm with bias, learned absolute positions, GELU.
    Legacy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropEncoder {
    /// Two linear layers with Swish in between.
    Mlp,
    /// A single linear map.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward block as a multiple of `d_model`.
    pub ffn_expansion: usize,
    pub rope_base: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Largest ring count with its own embedding row; larger counts clamp.
    pub r_max: usize,
    pub arch: Arch,
    pub prop_encoder: PropEncoder,
    pub norm_eps: f64,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    Heads { d_model: usize, n_heads: usize },
    #[error("head dimension {0} must be even for rotary embeddings")]
    OddHead(usize),
    #[error("{0} must be positive")]
    Zero(&'static str),
}

impl ModelConfig {
    /// Desk-scale defaults: 64 wide, 3 layers, 4 heads.
    pub fn small(vocab_size: usize, r_max: usize, max_len: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            ffn_expansion: 2,
            rope_base: 10_000.0,
            max_len,
            vocab_size,
            r_max,
            arch: Arch::Modern,
            prop_encoder: PropEncoder::Mlp,
            norm_eps: 1e-6,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (v, name) in [
            (self.d_model, "d_model"),
            (self.n_layers, "n_layers"),
            (self.n_heads, "n_heads"),
            (self.ffn_expansion, "ffn_expansion"),
            (self.max_len, "max_len"),
            (self.vocab_size, "vocab_size"),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ConfigError::Heads {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if self.arch == Arch::Modern && self.head_dim() % 2 != 0 {
            return Err(ConfigError::OddHead(self.head_dim()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d_model * self.ffn_expansion
    }
}
