//! A small causal transformer language model with exact analytic gradients.
//!
//! The architecture is fixed: token embedding (plus a learned positional
//! table in absolute mode) feeding `L` pre-norm blocks of multi-head causal
//! self-attention and a SiLU MLP, followed by a linear vocabulary head. The
//! pre-norm is a gain-free RMS norm, so every attention input row stays a
//! positive scalar multiple of its embedding row — the property the span
//! membership test downstream depends on.
//!
//! All math is `f64`; operations are pure functions of (params, batch, seed)
//! and are bitwise deterministic, including under the internal per-sequence
//! parallelism.

mod backward;
mod checkpoint;
mod forward;
mod generate;
mod params;
mod train;

pub use backward::{backward, capture_gradient, BatchMeta, GradientCapture, Gradients, LayerGrads};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{embed, embed_token, forward, loss_from_logits, ForwardPass};
pub use generate::{generate, perplexity};
pub use params::{merge_lora, LayerParams, LoraFactors, TinyLmParams};
pub use train::{train, EpochStat, TrainConfig, TrainLog};

use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;

/// How positions enter the model: an additive learned table, or rotary
/// rotations applied to queries and keys after projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    Absolute,
    Rotary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub positional_mode: PositionalMode,
    pub mlp_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::ShapeError(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(ModelError::ShapeError(
                "vocab_size must be at least 4 (reserved tokens)".into(),
            ));
        }
        if self.max_seq_len < 2 || self.num_layers == 0 || self.mlp_hidden == 0 {
            return Err(ModelError::ShapeError(
                "max_seq_len >= 2, num_layers >= 1, mlp_hidden >= 1 required".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Which parameters a fine-tuning run updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PeftMode {
    FullFt,
    Lora {
        rank: usize,
        adapted_layers: Vec<usize>,
    },
    Selective {
        trainable_layers: Vec<usize>,
    },
}

impl PeftMode {
    /// The attack consumes the first transformer layer's query gradient, so
    /// LoRA must adapt layer 0 and selective tuning must train it.
    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        match self {
            PeftMode::FullFt => Ok(()),
            PeftMode::Lora {
                rank,
                adapted_layers,
            } => {
                if *rank == 0 || *rank > config.embed_dim / 2 {
                    return Err(ModelError::ShapeError(format!(
                        "lora rank {} outside 1..={}",
                        rank,
                        config.embed_dim / 2
                    )));
                }
                if adapted_layers.iter().any(|&l| l >= config.num_layers) {
                    return Err(ModelError::ShapeError("adapted layer out of range".into()));
                }
                if !adapted_layers.contains(&0) {
                    return Err(ModelError::ShapeError(
                        "lora must adapt layer 0 so a first-layer query gradient exists".into(),
                    ));
                }
                Ok(())
            }
            PeftMode::Selective { trainable_layers } => {
                if trainable_layers.iter().any(|&l| l >= config.num_layers) {
                    return Err(ModelError::ShapeError("trainable layer out of range".into()));
                }
                if !trainable_layers.contains(&0) {
                    return Err(ModelError::ShapeError(
                        "selective tuning must include layer 0".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PeftMode::FullFt => "full",
            PeftMode::Lora { .. } => "lora",
            PeftMode::Selective { .. } => "selective",
        }
    }
}

/// One fine-tuning batch: a list of token sequences of possibly different
/// lengths. `b_n` is the total token count across the batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub sequences: Vec<Vec<TokenId>>,
}

impl TokenBatch {
    pub fn new(sequences: Vec<Vec<TokenId>>) -> Self {
        TokenBatch { sequences }
    }

    pub fn batch_size(&self) -> usize {
        self.sequences.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        for seq in &self.sequences {
            if seq.len() > config.max_seq_len {
                return Err(ModelError::SequenceTooLong {
                    len: seq.len(),
                    max: config.max_seq_len,
                });
            }
            for &t in seq {
                if t as usize >= config.vocab_size {
                    return Err(ModelError::InvalidToken {
                        token: t,
                        vocab_size: config.vocab_size,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("token id {token} out of range for vocab size {vocab_size}")]
    InvalidToken { token: TokenId, vocab_size: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence length {len} below minimum {min}")]
    SequenceTooShort { len: usize, min: usize },
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("non-finite value encountered: {0}")]
    NumericalError(String),
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad checkpoint or capture file: {0}")]
    BadFile(String),
}
