//! Compact encoder-only masked language model with sparse attention.
//!
//! Architecture: token embedding + learned absolute position embedding,
//! `n_layers` pre-norm blocks (multi-head sparse self-attention, GELU
//! feed-forward), final layer norm, and an output projection to vocabulary
//! logits that is tied to the token embedding by default.
//!
//! Everything runs in `f64`. Reverse-mode gradients are hand-derived per
//! layer and checked against central finite differences in the tests.

mod checkpoint;
mod forward;
mod matrix;
mod pattern;
mod weights;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use forward::{ForwardOutput, ForwardTrace, GradientOutput, LossFn, ModelInput};
pub use matrix::{gemm, Matrix};
pub use pattern::{attention_pattern, resolve_globals, AttentionPattern};
pub use weights::{LayerWeights, Weights};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("position {position}: token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        id: TokenId,
        vocab_size: usize,
    },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn default_true() -> bool {
    true
}

/// Model shape and attention pattern.
///
/// `global_positions` may be negative to count from the end of the sequence:
/// `-2` is the label slot of every assembled input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    /// Each position sees `window_size / 2` neighbours on either side.
    pub window_size: usize,
    pub global_positions: Vec<i64>,
    #[serde(default)]
    pub random_blocks_per_row: usize,
    #[serde(default = "default_true")]
    pub tie_output: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Default shape: 4 layers, d_model 128, 4 heads, FFN 256, window 64,
    /// globals at `[CLS]` and the label slot, context up to 4096.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 256,
            max_seq_len: 4096,
            window_size: 64,
            global_positions: vec![0, -2],
            random_blocks_per_row: 0,
            tie_output: true,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
            ("window_size", self.window_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.window_size > self.max_seq_len {
            return Err(ModelError::Config(format!(
                "window_size {} exceeds max_seq_len {}",
                self.window_size, self.max_seq_len
            )));
        }
        if let Some(g) = self
            .global_positions
            .iter()
            .find(|g| g.unsigned_abs() as usize >= self.max_seq_len)
        {
            return Err(ModelError::Config(format!(
                "global position {g} outside max_seq_len {}",
                self.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Parameters plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl ModelState {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Ok(Self { config, weights })
    }

    /// Pattern used for a `seq_len` input; random targets derive from the
    /// config seed so a given state always sees the same pattern.
    pub fn pattern(&self, seq_len: usize) -> AttentionPattern {
        attention_pattern(&self.config, seq_len, self.config.seed)
    }

    /// Token-embedding rows for `ids` (position embeddings are added later).
    pub fn lookup(&self, ids: &[TokenId]) -> Result<Matrix> {
        let d = self.config.d_model;
        let mut out = Matrix::zeros(ids.len(), d);
        for (p, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    position: p,
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
            out.row_mut(p).copy_from_slice(self.weights.tok_emb.row(id as usize));
        }
        Ok(out)
    }
}
