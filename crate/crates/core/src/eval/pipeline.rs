use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::RankedLists;
use super::report::RunMetrics;
use crate::data::{Dataset, Split};
use crate::artifacts::{read_bin, write_bin};
use crate::error::{Error, Result};
use crate::generator::{generate, train_generator, BeamConfig, Decoding, GenTrainReport, Generator, GeneratorConfig, SimilarityTable};
use crate::quantizer::SemanticIdTable;
use crate::rng;
use crate::stage1::{train_stage1, Catalog, CatalogCodes, Stage1Config, Stage1Model, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub beam_size: usize,
    /// Restrict expansion to prefixes of catalog IDs.
    pub constrained: bool,
    /// Histories decoded together.
    pub batch_users: usize,
    /// Evaluate a fixed random subset of users; all users when `None`.
    pub max_users: Option<usize>,
    pub user_sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10],
            beam_size: 50,
            constrained: false,
            batch_users: 32,
            max_users: None,
            user_sample_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn depth(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be non-empty and positive".into()));
        }
        if self.beam_size < self.depth() {
            return Err(Error::Config(format!("beam size {} is below the largest k {}", self.beam_size, self.depth())));
        }
        if self.batch_users == 0 {
            return Err(Error::Config("batch_users must be positive".into()));
        }
        Ok(())
    }

    /// Indices of the users evaluated on `split`.
    pub fn users(&self, ds: &Dataset, split: Split) -> Vec<usize> {
        let mut users: Vec<usize> = (0..ds.sequences.len())
            .filter(|&u| {
                let s = &ds.sequences[u];
                s.target_for(split).is_some() && !s.history_for(split).is_empty()
            })
            .collect();
        if let Some(m) = self.max_users {
            if m < users.len() {
                users.shuffle(&mut rng::stream(self.user_sample_seed, "eval/users"));
                users.truncate(m);
                users.sort_unstable();
            }
        }
        users
    }
}

/// One user's recommendation list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub user_id: u32,
    pub target: u32,
    pub item_ids: Vec<u32>,
    pub log_probs: Vec<f64>,
    pub exhausted: bool,
}

/// Generates top-`depth` lists for `users` on `split`.
pub fn rank_users(
    model: &Generator,
    dec: &Decoding<'_>,
    ds: &Dataset,
    split: Split,
    users: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<UserRanking>> {
    cfg.validate()?;
    let beam = BeamConfig {
        beam_size: cfg.beam_size,
        top_k: cfg.depth(),
        constrained: cfg.constrained,
    };
    let max_len = model.cfg.max_len;
    let mut out = Vec::with_capacity(users.len());
    for chunk in users.chunks(cfg.batch_users) {
        let mut hist = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for &u in chunk {
            let s = &ds.sequences[u];
            let target = s
                .target_for(split)
                .ok_or_else(|| Error::Precondition(format!("user {} has no {split:?} target", s.user_id)))?;
            let h = s.history_for(split);
            hist.push(&h[h.len().saturating_sub(max_len)..]);
            targets.push((s.user_id, target));
        }
        for (res, (user_id, target)) in generate(model, dec, &hist, &beam)?.into_iter().zip(targets) {
            out.push(UserRanking {
                user_id,
                target,
                item_ids: res.items,
                log_probs: res.log_probs,
                exhausted: res.exhausted,
            });
        }
    }
    Ok(out)
}

pub fn metrics_of(variant: &str, seed: u64, rankings: &[UserRanking], cfg: &EvalConfig) -> Result<RunMetrics> {
    let lists = RankedLists::new(cfg.depth(), rankings.iter().map(|r| r.item_ids.clone()).collect())?;
    let targets: Vec<u32> = rankings.iter().map(|r| r.target).collect();
    RunMetrics::compute(variant, seed, &lists, &targets, &cfg.ks)
}

/// Recommendation lists as JSON lines.
pub fn rankings_jsonl(rankings: &[UserRanking]) -> Result<String> {
    let mut s = String::new();
    for r in rankings {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// A trained tokenizer and the catalog's semantic IDs.
pub struct Tokenized {
    pub model: Stage1Model,
    pub report: TrainReport,
    pub codes: CatalogCodes,
}

pub fn tokenize(ds: &Dataset, cfg: &Stage1Config) -> Result<Tokenized> {
    let (model, report) = train_stage1(ds, cfg)?;
    let catalog = Catalog::from_dataset(ds, model.store.dtype())?;
    let codes = model.quantize_catalog(&catalog)?;
    Ok(Tokenized { model, report, codes })
}

/// Everything the generator needs from the tokenizer.
#[derive(Debug, Clone)]
pub struct IdBundle {
    pub codes: CatalogCodes,
    /// Stage-1 code vectors laid out `[signal, level, code, dim]`.
    pub codebook: Vec<f64>,
    pub codebook_dim: usize,
}

const VECTORS_FILE: &str = "item_vectors.bin";
const CODEBOOK_FILE: &str = "codebook_vectors.bin";

impl IdBundle {
    pub fn of(tok: &Tokenized) -> Result<Self> {
        let (codebook, codebook_dim) = inherit_vectors(&tok.model)?;
        Ok(Self {
            codes: tok.codes.clone(),
            codebook,
            codebook_dim,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.codes.table.save(dir)?;
        write_bin(&dir.join(VECTORS_FILE), &(self.codes.width, &self.codes.vectors))?;
        write_bin(&dir.join(CODEBOOK_FILE), &(self.codebook_dim, &self.codebook))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let table = SemanticIdTable::load(dir)?;
        let (width, vectors): (usize, Vec<f64>) = read_bin(&dir.join(VECTORS_FILE))?;
        let (codebook_dim, codebook): (usize, Vec<f64>) = read_bin(&dir.join(CODEBOOK_FILE))?;
        if vectors.len() != table.n_items() * width {
            return Err(Error::Misaligned(format!("{} vector values for {} items of width {width}", vectors.len(), table.n_items())));
        }
        Ok(Self {
            codes: CatalogCodes { table, vectors, width },
            codebook,
            codebook_dim,
        })
    }

    pub fn similarity(&self, k: u16) -> Result<SimilarityTable> {
        SimilarityTable::build(&self.codes.vectors, self.codes.width, k)
    }
}

/// Stage-1 code vectors laid out `[signal, level, code, dim]`.
pub fn inherit_vectors(model: &Stage1Model) -> Result<(Vec<f64>, usize)> {
    let banks = model.host_banks()?;
    let mut out = Vec::new();
    for &s in &model.signals {
        out.extend_from_slice(&banks[model.codebooks.bank_index(s)?].data);
    }
    Ok((out, model.cfg.dim))
}

pub struct GenerationRun {
    pub generator: Generator,
    pub report: GenTrainReport,
    pub similarity: SimilarityTable,
    pub rankings: Vec<UserRanking>,
    pub metrics: RunMetrics,
}

/// Trains the generator on the bundle's IDs and evaluates it on the test
/// split.
pub fn generate_and_evaluate(
    ds: &Dataset,
    ids: &IdBundle,
    gcfg: &GeneratorConfig,
    ecfg: &EvalConfig,
    variant: &str,
) -> Result<GenerationRun> {
    ecfg.validate()?;
    let similarity = ids.similarity(gcfg.k)?;
    let inherit = gcfg.inherit_codebooks.then(|| (ids.codebook.as_slice(), ids.codebook_dim));
    let (generator, report) = train_generator(ds, &ids.codes.table, &similarity, gcfg, inherit)?;
    let dec = Decoding::new(&ids.codes.table, &similarity, ecfg.constrained);
    let users = ecfg.users(ds, Split::Test);
    let rankings = rank_users(&generator, &dec, ds, Split::Test, &users, ecfg)?;
    let metrics = metrics_of(variant, gcfg.seed, &rankings, ecfg)?;
    Ok(GenerationRun {
        generator,
        report,
        similarity,
        rankings,
        metrics,
    })
}
