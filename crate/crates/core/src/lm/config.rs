use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte vocabulary plus one padding id.
pub const BYTE_VOCAB: usize = 257;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            seq_len: 128,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        if self.n_layers < 1 {
            return bad("n_layers must be at least 1");
        }
        if self.vocab_size < 2 || self.d_model == 0 || self.d_ff == 0 {
            return bad("vocab_size, d_model and d_ff must be positive");
        }
        Ok(())
    }

    /// Quantized linear layers in canonical order: block-major, then q, k, v, out, fc1, fc2.
    pub fn quantized_layers(&self) -> Vec<LayerId> {
        (0..self.n_layers)
            .flat_map(|block| LinearKind::ALL.iter().map(move |&kind| LayerId { block, kind }))
            .collect()
    }

    /// `(d_out, d_in)` of a linear layer's weight.
    pub fn linear_shape(&self, kind: LinearKind) -> (usize, usize) {
        match kind {
            LinearKind::Q | LinearKind::K | LinearKind::V | LinearKind::Out => (self.d_model, self.d_model),
            LinearKind::Fc1 => (self.d_ff, self.d_model),
            LinearKind::Fc2 => (self.d_model, self.d_ff),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinearKind {
    Q,
    K,
    V,
    Out,
    Fc1,
    Fc2,
}

impl LinearKind {
    pub const ALL: [LinearKind; 6] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::Out,
        LinearKind::Fc1,
        LinearKind::Fc2,
    ];

    fn path(self) -> &'static str {
        match self {
            LinearKind::Q => "attn.q",
            LinearKind::K => "attn.k",
            LinearKind::V => "attn.v",
            LinearKind::Out => "attn.out",
            LinearKind::Fc1 => "mlp.fc1",
            LinearKind::Fc2 => "mlp.fc2",
        }
    }
}

/// A quantized linear layer of the transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub kind: LinearKind,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.kind.path())
    }
}
