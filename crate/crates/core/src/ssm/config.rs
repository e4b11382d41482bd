use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Mamba1,
    Mamba2,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mamba1" | "mamba-1" | "m1" => Ok(Variant::Mamba1),
            "mamba2" | "mamba-2" | "m2" => Ok(Variant::Mamba2),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

/// How sequences enter the first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputMode {
    /// Callers supply `d_model`-wide vectors directly.
    #[default]
    RawVectors,
    /// Callers supply token ids looked up in an embedding table.
    EmbeddedTokens { vocab_size: usize },
}

fn default_eps() -> f64 {
    1e-5
}

fn default_heads() -> usize {
    1
}

/// Architecture hyperparameters shared by every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub n_layers: usize,
    /// State groups per layer. Only meaningful for Mamba-2.
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default)]
    pub input: InputMode,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant, d_model: usize, d_state: usize, n_layers: usize) -> Self {
        ModelConfig {
            variant,
            d_model,
            d_state,
            d_conv: 4,
            expand: 2,
            n_layers,
            n_heads: 1,
            input: InputMode::RawVectors,
            norm_eps: default_eps(),
        }
    }

    pub fn with_heads(mut self, n_heads: usize) -> Self {
        self.n_heads = n_heads;
        self
    }

    pub fn with_conv(mut self, d_conv: usize) -> Self {
        self.d_conv = d_conv;
        self
    }

    pub fn with_expand(mut self, expand: usize) -> Self {
        self.expand = expand;
        self
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// States per head group (Mamba-2); the whole state vector for Mamba-1.
    pub fn states_per_head(&self) -> usize {
        match self.variant {
            Variant::Mamba1 => self.d_state,
            Variant::Mamba2 => self.d_state / self.n_heads,
        }
    }

    /// Desk-sized Mamba-2 used by the CLI when no config file is given.
    pub fn desk() -> Self {
        ModelConfig::new(Variant::Mamba2, 64, 16, 4).with_heads(4)
    }

    /// Hidden sizes of the 130M-parameter checkpoints: 24 layers, D = 768,
    /// N = 128, expansion 2, kernel width 4.
    pub fn scale_130m(variant: Variant) -> Self {
        let cfg = ModelConfig::new(variant, 768, 128, 24);
        match variant {
            Variant::Mamba1 => cfg,
            Variant::Mamba2 => cfg.with_heads(8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("expand", self.expand),
            ("n_heads", self.n_heads),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.variant == Variant::Mamba2 && self.d_state % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_state {} is not divisible by n_heads {}",
                self.d_state, self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "norm_eps must be positive, got {}",
                self.norm_eps
            )));
        }
        if let InputMode::EmbeddedTokens { vocab_size: 0 } = self.input {
            return Err(Error::InvalidConfig("vocab_size must be at least 1".into()));
        }
        Ok(())
    }
}
