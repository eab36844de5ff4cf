use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use semrec_core::data::{IngestConfig, SynthConfig};
use semrec_core::eval::EvalConfig;
use semrec_core::generator::GeneratorConfig;
use semrec_core::stage1::Stage1Config;
use semrec_core::{Error, Result};

pub const DATA_ROOT_ENV: &str = "SEMREC_DATA_ROOT";

/// Sections of a TOML config file; absent keys keep built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub stage1: Stage1Config,
    pub generator: GeneratorConfig,
    pub eval: EvalConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// `$SEMREC_DATA_ROOT/<name>`, or `<name>` under the working directory.
pub fn default_dir(name: &str) -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
        .join(name)
}

pub fn or_default(p: &Option<PathBuf>, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| default_dir(name))
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

#[derive(Debug, Clone, Default, Args)]
pub struct Stage1Flags {
    /// Codebook levels L
    #[arg(long)]
    pub levels: Option<usize>,
    /// Codes per level N
    #[arg(long)]
    pub codes: Option<usize>,
    /// Representation and codebook dimension D
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "quant-batch-size", id = "quant_batch_size")]
    pub batch_size: Option<usize>,
    #[arg(long = "quant-lr", id = "quant_lr")]
    pub lr: Option<f64>,
    #[arg(long = "quant-epochs", id = "quant_epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long = "quant-patience", id = "quant_patience")]
    pub patience: Option<usize>,
    #[arg(long)]
    pub no_mim: bool,
    #[arg(long)]
    pub no_rec: bool,
    #[arg(long)]
    pub no_shared_codebook: bool,
    #[arg(long)]
    pub drop_id: bool,
    #[arg(long)]
    pub drop_text: bool,
    #[arg(long)]
    pub drop_image: bool,
}

impl Stage1Flags {
    pub fn apply(&self, c: &mut Stage1Config, seed: Option<u64>) {
        set!(c.levels, self.levels);
        set!(c.codes, self.codes);
        set!(c.dim, self.dim);
        set!(c.beta, self.beta);
        set!(c.gamma, self.gamma);
        set!(c.tau, self.tau);
        set!(c.alpha, self.alpha);
        set!(c.batch_size, self.batch_size);
        set!(c.lr, self.lr);
        set!(c.max_epochs, self.max_epochs);
        set!(c.patience, self.patience);
        set!(c.seed, seed);
        let a = &mut c.ablation;
        a.no_mim |= self.no_mim;
        a.no_rec |= self.no_rec;
        a.no_shared_codebook |= self.no_shared_codebook;
        a.drop_id |= self.drop_id;
        a.drop_text |= self.drop_text;
        a.drop_image |= self.drop_image;
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenFlags {
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    /// History items fed to the encoder
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Similarity buckets K
    #[arg(long = "buckets")]
    pub k: Option<u16>,
    /// Encoder layers with similarity-modulated attention
    #[arg(long)]
    pub sim_layers: Option<usize>,
    /// Keep the similarity embedding at all-ones
    #[arg(long)]
    pub freeze_sim: bool,
    /// Initialize sub-token embeddings from the stage-1 codebooks
    #[arg(long)]
    pub inherit_codebooks: bool,
    #[arg(long = "gen-batch-size", id = "gen_batch_size")]
    pub batch_size: Option<usize>,
    #[arg(long = "gen-lr", id = "gen_lr")]
    pub lr: Option<f64>,
    #[arg(long = "gen-epochs", id = "gen_epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long = "gen-patience", id = "gen_patience")]
    pub patience: Option<usize>,
}

impl GenFlags {
    pub fn apply(&self, c: &mut GeneratorConfig, seed: Option<u64>) {
        set!(c.model_dim, self.model_dim);
        set!(c.heads, self.heads);
        set!(c.encoder_layers, self.encoder_layers);
        set!(c.decoder_layers, self.decoder_layers);
        set!(c.ff_dim, self.ff_dim);
        set!(c.max_len, self.max_len);
        set!(c.k, self.k);
        set!(c.sim_layers, self.sim_layers);
        set!(c.batch_size, self.batch_size);
        set!(c.lr, self.lr);
        set!(c.max_epochs, self.max_epochs);
        set!(c.patience, self.patience);
        set!(c.seed, seed);
        c.freeze_sim_ones |= self.freeze_sim;
        c.inherit_codebooks |= self.inherit_codebooks;
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalFlags {
    /// Cutoffs, comma separated
    #[arg(long = "k", value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long = "beam")]
    pub beam_size: Option<usize>,
    /// Restrict beam expansion to catalog ID prefixes
    #[arg(long)]
    pub constrained: bool,
    /// Evaluate a fixed random subset of this many users
    #[arg(long)]
    pub max_users: Option<usize>,
}

impl EvalFlags {
    pub fn apply(&self, c: &mut EvalConfig) {
        set!(c.ks, self.ks);
        set!(c.beam_size, self.beam_size);
        if self.max_users.is_some() {
            c.max_users = self.max_users;
        }
        c.constrained |= self.constrained;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file: FileConfig = toml::from_str("[stage1]\nlevels = 2\ncodes = 32\n[generator]\nk = 50\n").unwrap();
        let mut s1 = file.stage1.clone();
        let flags = Stage1Flags {
            codes: Some(16),
            no_mim: true,
            ..Default::default()
        };
        flags.apply(&mut s1, Some(9));
        assert_eq!((s1.levels, s1.codes, s1.dim, s1.seed), (2, 16, Stage1Config::default().dim, 9));
        assert!(s1.ablation.no_mim);
        let mut g = file.generator.clone();
        GenFlags::default().apply(&mut g, None);
        assert_eq!(g.k, 50);
        assert!(toml::from_str::<FileConfig>("[bogus]\nx = 1\n").is_err());
    }
}
