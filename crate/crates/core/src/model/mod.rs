//! Transformer encoder with summed token/position/segment embeddings,
//! masked multi-head self-attention, a `tanh`-projection function
//! embedding head and a tied language-model head. Gradients are computed
//! by hand-written reverse mode so the same code runs in `f32` for
//! training and `f64` for gradient checking.

mod checkpoint;
mod encoder;
mod heads;
mod mask;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use encoder::{Forward, ForwardTrace, LayerTrace, ModelInput};
pub use heads::{
    function_embedding, function_embedding_backward, lm_logits, lm_logits_backward,
};
pub use mask::{build_mask, AttentionMask, MaskMode};
pub use params::{LayerParams, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 12,
            hidden: 768,
            intermediate: 3072,
            max_seq_len: 256,
            vocab_size: 21_000,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("model needs at least one layer".into());
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.intermediate == 0 {
            return fail("intermediate size must be positive".into());
        }
        if self.max_seq_len < 8 {
            return fail(format!("max_seq_len {} < 8", self.max_seq_len));
        }
        if self.vocab_size < crate::tokenizer::SPECIAL_TOKENS.len() {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        Ok(())
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl Model<f32> {
    /// Truncated-normal (std 0.02) initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config,
            params: Parameters::init(&config, seed),
        })
    }
}

impl<T: crate::numeric::Float> Model<T> {
    pub fn zeros(config: ModelConfig) -> Self {
        Model {
            config,
            params: Parameters::zeros(&config),
        }
    }

    pub fn cast<U: crate::numeric::Float>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
        }
    }
}
