use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a BERT-like encoder.
///
/// Serialized with the short keys `d`, `a`, `h`, `i`, `vocab_size`,
/// `max_positions`, `dropout`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of transformer layers.
    #[serde(rename = "d")]
    pub layers: usize,
    /// Attention heads per layer.
    #[serde(rename = "a")]
    pub heads: usize,
    /// Hidden size.
    #[serde(rename = "h")]
    pub hidden: usize,
    /// Feed-forward inner size.
    #[serde(rename = "i")]
    pub intermediate: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_dropout() -> f32 {
    0.1
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl EncoderConfig {
    pub fn new(layers: usize, heads: usize, hidden: usize, intermediate: usize, vocab_size: usize, max_positions: usize) -> Self {
        EncoderConfig {
            layers,
            heads,
            hidden,
            intermediate,
            vocab_size,
            max_positions,
            dropout: default_dropout(),
        }
    }

    pub fn with_dropout(mut self, dropout: f32) -> Self {
        self.dropout = dropout;
        self
    }

    /// RobBERT v2 / RoBERTa-base shape.
    pub fn robbert_base(vocab_size: usize) -> Self {
        Self::new(12, 12, 768, 3072, vocab_size, 512)
    }

    /// Half the layers of the base shape.
    pub fn distilbert(vocab_size: usize) -> Self {
        Self::new(6, 12, 768, 3072, vocab_size, 512)
    }

    /// Bort hyperparametrization, keeping the 768 hidden size.
    pub fn bort(vocab_size: usize) -> Self {
        Self::new(4, 8, 768, 768, vocab_size, 512)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d", self.layers),
            ("a", self.heads),
            ("h", self.hidden),
            ("i", self.intermediate),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Closed-form number of trainable scalars in an encoder with a tied MLM
/// decoder.
pub fn count_parameters(config: &EncoderConfig) -> usize {
    let EncoderConfig {
        layers: d,
        hidden: h,
        intermediate: i,
        vocab_size: v,
        max_positions: p,
        ..
    } = *config;
    let embeddings = v * h + p * h + 2 * h;
    let attention = 4 * (h * h + h);
    let feed_forward = h * i + i + i * h + h;
    let layer = attention + feed_forward + 2 * 2 * h;
    // dense transform + layer norm + decoder bias; decoder weight is tied
    let head = h * h + h + 2 * h + v;
    embeddings + d * layer + head
}

/// Parameter counts listed for the reference architectures (V = 40000,
/// P = 512), in millions.
pub const REFERENCE_PARAMS: [(usize, usize, usize, usize, f64); 3] = [
    (12, 12, 768, 3072, 116.0),
    (6, 12, 768, 3072, 74.0),
    (4, 8, 768, 768, 46.0),
];

/// Reference count (millions) for a matching `(D, A, H, I)` if one is listed.
pub fn reference_params_millions(config: &EncoderConfig) -> Option<f64> {
    REFERENCE_PARAMS
        .iter()
        .find(|(d, a, h, i, _)| {
            (*d, *a, *h, *i) == (config.layers, config.heads, config.hidden, config.intermediate)
        })
        .map(|r| r.4)
}
