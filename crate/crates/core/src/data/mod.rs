//! Items, interaction sequences, leave-one-out splits and dataset storage.

mod ingest;
mod io;
mod synth;

pub use ingest::{ingest, IngestConfig, IngestReport};
pub use io::{read_embeddings, write_embeddings, EmbeddingMatrix};
pub use synth::{synthesize, SynthConfig, SyntheticCorpus};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One catalog item with its pre-trained modality embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: u32,
    /// Original key from the source files (synthetic items use their index).
    pub key: String,
    pub text_emb: Vec<f32>,
    pub image_emb: Vec<f32>,
    pub has_text: bool,
    pub has_image: bool,
}

/// Which leave-one-out split a sequence position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Chronological interactions of one user. The last item is the test
/// target and the second-to-last the validation target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: u32,
    pub items: Vec<u32>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split_at(&self, pos: usize) -> Split {
        let n = self.items.len();
        if pos + 1 == n {
            Split::Test
        } else if pos + 2 == n {
            Split::Valid
        } else {
            Split::Train
        }
    }

    pub fn splits(&self) -> Vec<Split> {
        (0..self.items.len()).map(|p| self.split_at(p)).collect()
    }

    /// Training prefix (everything before the validation target).
    pub fn train_items(&self) -> &[u32] {
        &self.items[..self.items.len().saturating_sub(2)]
    }

    pub fn valid_target(&self) -> u32 {
        self.items[self.items.len() - 2]
    }

    pub fn test_target(&self) -> u32 {
        self.items[self.items.len() - 1]
    }

    /// History used when predicting the held-out item of `split`.
    pub fn history_for(&self, split: Split) -> &[u32] {
        let n = self.items.len();
        match split {
            Split::Train | Split::Valid => &self.items[..n - 2],
            Split::Test => &self.items[..n - 1],
        }
    }

    pub fn target_for(&self, split: Split) -> Option<u32> {
        match split {
            Split::Train => None,
            Split::Valid => Some(self.valid_target()),
            Split::Test => Some(self.test_target()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub avg_len: f64,
}

impl DatasetStats {
    pub fn from_counts(n_users: usize, n_items: usize, n_interactions: usize) -> Self {
        let avg_len = if n_users == 0 {
            0.0
        } else {
            n_interactions as f64 / n_users as f64
        };
        Self {
            n_users,
            n_items,
            n_interactions,
            avg_len,
        }
    }

    /// Checks recomputed stats against a stored manifest (avg_len to 1e-9).
    pub fn verify(&self, manifest: &DatasetStats) -> Result<()> {
        let same = self.n_users == manifest.n_users
            && self.n_items == manifest.n_items
            && self.n_interactions == manifest.n_interactions
            && (self.avg_len - manifest.avg_len).abs() < 1e-9;
        if same {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "dataset stats {self:?} disagree with manifest {manifest:?}"
            )))
        }
    }
}

/// Items plus user sequences, the unit every later stage consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub items: Vec<ItemRecord>,
    pub sequences: Vec<InteractionSequence>,
    pub text_dim: usize,
    pub image_dim: usize,
}

pub const ITEMS_FILE: &str = "items.bin";
pub const SEQUENCES_FILE: &str = "sequences.bin";
pub const STATS_FILE: &str = "stats.json";

impl Dataset {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn stats(&self) -> DatasetStats {
        let n_inter = self.sequences.iter().map(InteractionSequence::len).sum();
        DatasetStats::from_counts(self.sequences.len(), self.items.len(), n_inter)
    }

    /// Structural checks: dense item ids, finite embeddings, valid references.
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() || self.sequences.is_empty() {
            return Err(Error::EmptyDataset("no items or no sequences".into()));
        }
        for (i, it) in self.items.iter().enumerate() {
            if it.item_id as usize != i {
                return Err(Error::Misaligned(format!("item at index {i} has id {}", it.item_id)));
            }
            if it.text_emb.len() != self.text_dim {
                return Err(Error::DimMismatch { expected: self.text_dim, got: it.text_emb.len() });
            }
            if it.image_emb.len() != self.image_dim {
                return Err(Error::DimMismatch { expected: self.image_dim, got: it.image_emb.len() });
            }
            if !it.text_emb.iter().chain(&it.image_emb).all(|v| v.is_finite()) {
                return Err(Error::Precondition(format!("item {i} has non-finite embedding values")));
            }
        }
        for s in &self.sequences {
            if s.items.len() < 3 {
                return Err(Error::Precondition(format!(
                    "user {} has {} interactions; leave-one-out needs at least 3",
                    s.user_id,
                    s.items.len()
                )));
            }
            if let Some(bad) = s.items.iter().find(|&&i| i as usize >= self.items.len()) {
                return Err(Error::Misaligned(format!("user {} references unknown item {bad}", s.user_id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let items = bincode::serialize(&(self.text_dim, self.image_dim, &self.items))?;
        write(&dir.join(ITEMS_FILE), &items)?;
        write(&dir.join(SEQUENCES_FILE), &bincode::serialize(&self.sequences)?)?;
        let stats = serde_json::to_string_pretty(&self.stats())?;
        write(&dir.join(STATS_FILE), stats.as_bytes())
    }

    /// Loads a dataset directory and checks it against its `stats.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let (text_dim, image_dim, items): (usize, usize, Vec<ItemRecord>) =
            bincode::deserialize(&read(&dir.join(ITEMS_FILE))?)?;
        let sequences: Vec<InteractionSequence> = bincode::deserialize(&read(&dir.join(SEQUENCES_FILE))?)?;
        let ds = Self {
            items,
            sequences,
            text_dim,
            image_dim,
        };
        let stats_path = dir.join(STATS_FILE);
        if stats_path.exists() {
            let manifest: DatasetStats = serde_json::from_slice(&read(&stats_path)?)?;
            ds.stats().verify(&manifest)?;
        }
        ds.validate()?;
        Ok(ds)
    }

    /// Content hash of the serialized dataset.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(bincode::serialize(&(self.text_dim, self.image_dim, &self.items))?);
        h.update(bincode::serialize(&self.sequences)?);
        Ok(hex::encode(h.finalize()))
    }
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leave_one_out_positions() {
        let s = InteractionSequence {
            user_id: 0,
            items: vec![4, 5, 6, 7],
        };
        assert_eq!(s.splits(), vec![Split::Train, Split::Train, Split::Valid, Split::Test]);
        assert_eq!(s.train_items(), &[4, 5]);
        assert_eq!(s.valid_target(), 6);
        assert_eq!(s.test_target(), 7);
        assert_eq!(s.history_for(Split::Valid), &[4, 5]);
        assert_eq!(s.history_for(Split::Test), &[4, 5, 6]);
    }

    #[test]
    fn average_length_of_public_benchmarks() {
        // Amazon Beauty, Sports, Clothing after 5-core filtering
        for (u, i, n, avg) in [
            (22_363, 12_101, 198_502, 8.88),
            (35_598, 18_357, 296_337, 8.32),
            (39_387, 23_033, 278_677, 7.08),
        ] {
            let s = DatasetStats::from_counts(u, i, n);
            assert!((s.avg_len - avg).abs() < 0.005, "{s:?}");
        }
    }

    #[test]
    fn save_load_roundtrip_checks_manifest() {
        let corpus = synthesize(&SynthConfig {
            n_items: 30,
            n_users: 20,
            n_clusters: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.dataset.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, corpus.dataset);

        let mut stats = back.stats();
        stats.n_interactions += 1;
        fs::write(dir.path().join(STATS_FILE), serde_json::to_string(&stats).unwrap()).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }
}
