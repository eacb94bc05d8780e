//! TOML configuration shared by the command-line tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::{default_beam_width, DEFAULT_TOP_K};
use crate::semtree::{DEFAULT_C, DEFAULT_K};
use crate::seq2seq::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSection {
    pub k: usize,
    pub c: usize,
    pub seed: u64,
}

impl Default for TreeSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            c: DEFAULT_C,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub m: usize,
    pub top_k: usize,
    /// Defaults to twice `top_k`.
    pub beam_width: Option<usize>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            m: 0,
            top_k: DEFAULT_TOP_K,
            beam_width: None,
        }
    }
}

impl RetrievalSection {
    pub fn beam(&self) -> usize {
        self.beam_width.unwrap_or_else(|| default_beam_width(self.top_k))
    }
}

/// Model dimensions. Vocabulary, branching and position count come from
/// the data, not from here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
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

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::new(2, 1, 1);
        Self {
            hidden: c.hidden,
            encoder_layers: c.encoder_layers,
            heads: c.heads,
            ffn_hidden: c.ffn_hidden,
            adaptor_hidden: c.adaptor_hidden,
            adaptor_heads: c.adaptor_heads,
            adaptor_ffn_hidden: c.adaptor_ffn_hidden,
            max_query_len: c.max_query_len,
            dropout: c.dropout,
            init_seed: c.init_seed,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, vocab_size: usize, branching: usize, max_positions: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            branching,
            max_positions,
            hidden: self.hidden,
            encoder_layers: self.encoder_layers,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            adaptor_hidden: self.adaptor_hidden,
            adaptor_heads: self.adaptor_heads,
            adaptor_ffn_hidden: self.adaptor_ffn_hidden,
            max_query_len: self.max_query_len,
            dropout: self.dropout,
            init_seed: self.init_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub tree: TreeSection,
    pub retrieval: RetrievalSection,
    pub model: ModelSection,
    pub train: TrainConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
