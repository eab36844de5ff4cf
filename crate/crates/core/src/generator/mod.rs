//! Stage 2: an encoder-decoder over composite semantic IDs with
//! similarity-modulated encoder attention, teacher-forced training and
//! beam-search generation.

mod attention;
mod beam;
mod bench;
mod model;
mod similarity;
mod train;

pub use attention::{SimAttention, SimEncoderBlock, SimilarityEmbedding};
pub use beam::{generate, top_combinations, BeamConfig, Candidate, Decoding, GenerationResult, Trie};
pub use bench::{benchmark_inference, TimingReport};
pub use model::{Encoded, Example, Generator, TokenSpace};
pub use similarity::{bucket, SimilarityTable};
pub use train::{evaluate_teacher_forced, fit, make_examples, split_examples, train_generator, GenEpochLog, GenTrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    /// History items fed to the encoder (most recent kept).
    pub max_len: usize,
    pub k: u16,
    /// Encoder layers (from the bottom) using similarity-modulated attention.
    pub sim_layers: usize,
    /// Keep the similarity embedding fixed at all-ones.
    pub freeze_sim_ones: bool,
    pub sim_noise_std: f64,
    /// Initialize sub-token embeddings from the stage-1 codebooks.
    pub inherit_codebooks: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub valid_users: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            model_dim: 192,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 384,
            max_len: 20,
            k: 100,
            sim_layers: 2,
            freeze_sim_ones: false,
            sim_noise_std: 0.01,
            inherit_codebooks: false,
            batch_size: 64,
            lr: 1e-3,
            max_epochs: 40,
            patience: 5,
            valid_users: 512,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self, sub_tokens: usize) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config("model_dim must be divisible by heads".into()));
        }
        if sub_tokens == 0 || self.model_dim % sub_tokens != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by the {sub_tokens} sub-tokens per position",
                self.model_dim
            )));
        }
        if self.sim_layers > self.encoder_layers {
            return Err(Error::Config("sim_layers exceeds encoder_layers".into()));
        }
        if self.max_len == 0 || self.batch_size == 0 || self.k == 0 || self.lr <= 0.0 {
            return Err(Error::Config("max_len, batch_size, k and lr must be positive".into()));
        }
        Ok(())
    }
}
