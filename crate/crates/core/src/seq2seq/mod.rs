//! Sequence-to-sequence identifier generator with a prefix-aware
//! weight-adaptor (PAWA) decoder.
//!
//! A transformer encoder reads the query. Generating token `i` of a SemId
//! uses a decoder block with its own parameters (`θ_i`, nothing shared across
//! positions) that attends over the prefix and the encoder states. A second
//! prefix-only block (`θ'_i`) produces a vector that a shared linear map
//! expands into the classification matrix `W_i`; the step's logits are
//! `E_i · W_i`.
//!
//! All arithmetic is `f64` with hand-written backward passes, so the
//! gradients can be checked against finite differences.

mod checkpoint;
mod layers;
mod model;
mod params;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use layers::log_softmax;
pub use model::{Encoded, PawaModel};
pub use params::{Init, ParamGroup, ParamStore, TensorSpec};
pub use train::{train, AdamState, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("query of {len} tokens exceeds the maximum of {max}")]
    QueryTooLong { len: usize, max: usize },
    #[error("prefix has {found} tokens but position {position} needs {position}")]
    PrefixLengthMismatch { position: usize, found: usize },
    #[error("position {position} outside 1..={max}")]
    PositionOutOfRange { position: usize, max: usize },
    #[error("invalid SemId sequence: {0}")]
    InvalidSemId(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("training diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Shape and regularization of a [`PawaModel`].
///
/// Output tokens are the branch labels `0..k` plus END (`k`), so the output
/// vocabulary has `k + 1` entries. The root symbol `l₀ = 0` reuses label 0's
/// input embedding; position embeddings tell them apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Query vocabulary size, including the padding and unknown ids.
    pub vocab_size: usize,
    /// Tree branching factor `k`.
    pub branching: usize,
    /// Number of decoding positions `D`: the longest truncated SemId
    /// (counting the root symbol) followed by END.
    pub max_positions: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub adaptor_hidden: usize,
    pub adaptor_heads: usize,
    pub adaptor_ffn_hidden: usize,
    pub max_query_len: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Defaults for a given vocabulary, branching factor and position count.
    pub fn new(vocab_size: usize, branching: usize, max_positions: usize) -> Self {
        Self {
            vocab_size,
            branching,
            max_positions,
            hidden: 64,
            encoder_layers: 2,
            heads: 4,
            ffn_hidden: 256,
            adaptor_hidden: 32,
            adaptor_heads: 4,
            adaptor_ffn_hidden: 64,
            max_query_len: crate::corpus::DEFAULT_MAX_QUERY_LEN,
            dropout: 0.1,
            init_seed: 0,
        }
    }

    /// Positions needed for a tree of depth `max_depth` truncated by `m`.
    pub fn positions_for(max_depth: usize, m: usize) -> usize {
        max_depth.saturating_sub(m) + 1
    }

    pub fn semid_vocab(&self) -> usize {
        self.branching + 1
    }

    pub fn end_token(&self) -> u32 {
        self.branching as u32
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must cover padding and unknown ids");
        }
        if self.branching < 1 {
            return bad("branching must be at least 1");
        }
        if self.max_positions < 1 {
            return bad("max_positions must be at least 1");
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("hidden must be a positive multiple of heads");
        }
        if self.adaptor_hidden == 0
            || self.adaptor_heads == 0
            || self.adaptor_hidden % self.adaptor_heads != 0
        {
            return bad("adaptor_hidden must be a positive multiple of adaptor_heads");
        }
        if self.max_query_len == 0 || self.ffn_hidden == 0 || self.adaptor_ffn_hidden == 0 {
            return bad("lengths and widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}
