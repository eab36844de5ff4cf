//! Stage 1: joint training of the disentangling encoders, the shared
//! residual codebooks and the sequence-to-item contrastive task.

mod model;
mod train;

pub use model::{Catalog, CatalogCodes, SignalForward, Stage1Model};
pub use train::{train_stage1, EpochLog, TrainReport};

use serde::{Deserialize, Serialize};

use crate::disentangle::Modality;
use crate::error::{Error, Result};
use crate::quantizer::Signal;

/// Module removals used by the ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Drop the mutual-information loss and the modality-specific encoders.
    pub no_mim: bool,
    /// Drop the contrastive loss, the sequence encoder and the ID signal.
    pub no_rec: bool,
    /// One codebook bank per signal instead of a shared bank.
    pub no_shared_codebook: bool,
    pub drop_id: bool,
    pub drop_text: bool,
    pub drop_image: bool,
    /// With `no_mim`, keep the specific encoders feeding the decoders so the
    /// architecture matches a `gamma = 0` run.
    pub keep_specific_encoders: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub levels: usize,
    pub codes: usize,
    pub dim: usize,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub seq_dim: usize,
    pub seq_heads: usize,
    pub seq_layers: usize,
    pub max_len: usize,
    /// Estimator updates before each joint update.
    pub estimator_steps: usize,
    /// Learning rate of the estimator optimizer.
    pub estimator_lr: f64,
    /// Items per step entering the mutual-information terms.
    pub mim_sample: usize,
    /// Validation users scored for early stopping.
    pub valid_users: usize,
    /// Mutual-information gradient reaches the behavior encoder too, not
    /// only the specific encoder.
    pub mim_into_behavior: bool,
    /// Block contrastive-loss gradient into the codebook entries.
    pub freeze_codebook_from_rec: bool,
    pub kmeans_init: bool,
    pub ablation: Ablation,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            levels: 3,
            codes: 256,
            dim: 128,
            beta: 1.0,
            gamma: 1.0,
            tau: 0.1,
            alpha: 0.25,
            batch_size: 256,
            lr: 1e-3,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            seq_dim: 64,
            seq_heads: 2,
            seq_layers: 2,
            max_len: 20,
            estimator_steps: 1,
            estimator_lr: 1e-2,
            mim_sample: 256,
            valid_users: 512,
            mim_into_behavior: true,
            freeze_codebook_from_rec: false,
            kmeans_init: true,
            ablation: Ablation::default(),
        }
    }
}

impl Stage1Config {
    /// Signals that make up the semantic ID, in ID order.
    pub fn signals(&self) -> Vec<Signal> {
        let a = &self.ablation;
        Signal::ALL
            .into_iter()
            .filter(|s| match s {
                Signal::Id => !a.no_rec && !a.drop_id,
                Signal::Text => !a.drop_text,
                Signal::Image => !a.drop_image,
            })
            .collect()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.signals().into_iter().filter_map(Signal::modality).collect()
    }

    pub fn uses_mim(&self) -> bool {
        !self.ablation.no_mim && !self.modalities().is_empty()
    }

    pub fn uses_specific(&self) -> bool {
        !self.ablation.no_mim || self.ablation.keep_specific_encoders
    }

    pub fn uses_rec(&self) -> bool {
        !self.ablation.no_rec
    }

    pub fn validate(&self) -> Result<()> {
        if self.signals().is_empty() {
            return Err(Error::Config("every signal is dropped".into()));
        }
        if self.ablation.keep_specific_encoders && !self.ablation.no_mim {
            return Err(Error::Config("keep_specific_encoders only applies with no_mim".into()));
        }
        for (name, v) in [
            ("levels", self.levels),
            ("codes", self.codes),
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("max_len", self.max_len),
            ("seq_dim", self.seq_dim),
            ("mim_sample", self.mim_sample),
            ("estimator_steps", self.estimator_steps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.uses_rec() && self.batch_size < 2 {
            return Err(Error::Config("contrastive training needs batch_size >= 2".into()));
        }
        if self.tau <= 0.0 || self.lr <= 0.0 || self.estimator_lr <= 0.0 || self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("tau and lr must be positive; alpha, beta, gamma non-negative".into()));
        }
        if self.seq_heads == 0 || self.seq_dim % self.seq_heads != 0 {
            return Err(Error::Config("seq_dim must be divisible by seq_heads".into()));
        }
        Ok(())
    }
}
