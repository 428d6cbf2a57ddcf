use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    /// Unused by the encoder-only transducer.
    pub n_dec_layers: usize,
    pub dropout: f64,
    /// Relative offsets beyond +-clip share the edge bias.
    pub relpos_clip: usize,
    pub session_dim: usize,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TransformerConfig {
    /// EMG-to-mel transducer: 6 layers, 8 heads, 768 / 3072, dropout 0.2.
    pub fn transduction() -> Self {
        Self {
            d_model: 768,
            n_heads: 8,
            d_ff: 3072,
            n_enc_layers: 6,
            n_dec_layers: 0,
            dropout: 0.2,
            relpos_clip: 100,
            session_dim: 32,
            seed: 0,
        }
    }

    /// Recognizer: 6 + 6 layers, 8 heads, 512 / 2048, dropout 0.1.
    pub fn recognition() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            n_enc_layers: 6,
            n_dec_layers: 6,
            dropout: 0.1,
            relpos_clip: 100,
            session_dim: 32,
            seed: 0,
        }
    }

    /// Small shapes for tests and laptop-scale runs.
    pub fn toy() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_enc_layers: 1,
            n_dec_layers: 1,
            dropout: 0.0,
            relpos_clip: 8,
            session_dim: 4,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "transduction" => Ok(Self::transduction()),
            "recognition" => Ok(Self::recognition()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::param(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn violations(&self, section: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_enc_layers", self.n_enc_layers),
            ("session_dim", self.session_dim),
        ] {
            if v == 0 {
                out.push(format!("{section}.{name} must be >= 1"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            out.push(format!(
                "{section}.d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("{section}.dropout must be in [0, 1) (got {})", self.dropout));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("model");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::param(v.join("; ")))
        }
    }
}
