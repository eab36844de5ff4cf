use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Example, Generator, TokenSpace};
use super::similarity::SimilarityTable;
use super::GeneratorConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::quantizer::SemanticIdTable;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Teacher-forced fraction of validation codes predicted exactly.
    pub valid_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTrainReport {
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    pub epochs: Vec<GenEpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub checksum: String,
}

/// Every training position after a user's first, with the preceding
/// `max_len` items as history.
pub fn make_examples(ds: &Dataset, max_len: usize) -> Vec<Example> {
    let mut out = Vec::new();
    for s in &ds.sequences {
        let train = s.train_items();
        for p in 1..train.len() {
            out.push(Example {
                history: train[p.saturating_sub(max_len)..p].to_vec(),
                target: train[p],
            });
        }
    }
    out
}

/// Leave-one-out examples of `split` for the given users.
pub fn split_examples(ds: &Dataset, split: Split, users: &[usize], max_len: usize) -> Vec<Example> {
    users
        .iter()
        .filter_map(|&u| {
            let s = &ds.sequences[u];
            let target = s.target_for(split)?;
            let h = s.history_for(split);
            (!h.is_empty()).then(|| Example {
                history: h[h.len().saturating_sub(max_len)..].to_vec(),
                target,
            })
        })
        .collect()
}

fn batch_loss(model: &Generator, ids: &SemanticIdTable, sim: &SimilarityTable, batch: &[Example]) -> Result<(candle_core::Tensor, usize)> {
    let hist: Vec<&[u32]> = batch.iter().map(|e| e.history.as_slice()).collect();
    for e in batch {
        if e.target as usize >= ids.n_items() {
            return Err(Error::Misaligned(format!("target item {} has no semantic ID", e.target)));
        }
    }
    let targets: Vec<&[u32]> = batch.iter().map(|e| ids.item(e.target as usize)).collect();
    let enc = model.encode(&hist, ids, sim)?;
    let logits = model.teacher_forced_logits(&enc, &targets)?;
    let correct = model.correct_codes(&logits, &targets)?;
    Ok((model.loss(&logits, &targets)?, correct))
}

/// Mean teacher-forced loss and code accuracy over `examples`.
pub fn evaluate_teacher_forced(
    model: &Generator,
    ids: &SemanticIdTable,
    sim: &SimilarityTable,
    examples: &[Example],
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for batch in examples.chunks(model.cfg.batch_size.max(1)) {
        let (l, c) = batch_loss(model, ids, sim, batch)?;
        loss += scalar(&l)? * batch.len() as f64;
        correct += c;
    }
    let n = examples.len().max(1) as f64;
    Ok((loss / n, correct as f64 / (n * model.space.width() as f64)))
}

/// Trains `model` on `train(epoch)` examples, early-stopping on the
/// validation loss; the best epoch's parameters are kept.
pub fn fit(
    model: &Generator,
    ids: &SemanticIdTable,
    sim: &SimilarityTable,
    train: impl Fn(usize) -> Vec<Example>,
    valid: &[Example],
) -> Result<GenTrainReport> {
    let cfg = &model.cfg;
    let vars = model.store.vars_where(|_| true);
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut initial_loss = None;
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize);
    let mut best_params = model.store.snapshot()?;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut examples = train(epoch);
        examples.shuffle(&mut rng::stream(cfg.seed, &format!("gen/shuffle/{epoch}")));
        let mut sum = 0.0;
        let mut count = 0usize;
        for (step, batch) in examples.chunks(cfg.batch_size).enumerate() {
            let (loss, _) = batch_loss(model, ids, sim, batch)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    what: "generator loss".into(),
                });
            }
            initial_loss.get_or_insert(v);
            opt.backward_step(&loss)?;
            sum += v * batch.len() as f64;
            count += batch.len();
        }
        if count == 0 {
            return Err(Error::EmptyDataset("no training examples for the generator".into()));
        }
        let (valid_loss, valid_accuracy) = if valid.is_empty() {
            (sum / count as f64, 0.0)
        } else {
            evaluate_teacher_forced(model, ids, sim, valid)?
        };
        log::info!(
            "generator epoch {epoch}: train {:.4} valid {valid_loss:.4} acc {valid_accuracy:.4}",
            sum / count as f64
        );
        epochs.push(GenEpochLog {
            epoch,
            train_loss: sum / count as f64,
            valid_loss,
            valid_accuracy,
        });
        if valid_loss < best.0 {
            best = (valid_loss, epoch);
            best_params = model.store.snapshot()?;
        } else if epoch - best.1 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    model.store.restore(&best_params)?;
    Ok(GenTrainReport {
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        epochs,
        best_epoch: best.1,
        stopped_early,
        checksum: model.store.checksum()?,
    })
}

/// Builds and trains a generator on the training positions of `ds`.
/// `inherit` supplies stage-1 code vectors when `cfg.inherit_codebooks`.
pub fn train_generator(
    ds: &Dataset,
    ids: &SemanticIdTable,
    sim: &SimilarityTable,
    cfg: &GeneratorConfig,
    inherit: Option<(&[f64], usize)>,
) -> Result<(Generator, GenTrainReport)> {
    ds.validate()?;
    if ids.n_items() != ds.n_items() || sim.n_items() != ds.n_items() {
        return Err(Error::Misaligned(format!(
            "{} items in the dataset, {} semantic IDs, {} similarity rows",
            ds.n_items(),
            ids.n_items(),
            sim.n_items()
        )));
    }
    let model = Generator::new(cfg, TokenSpace::of(ids), inherit, DType::F32)?;
    let mut users: Vec<usize> = (0..ds.sequences.len()).collect();
    users.shuffle(&mut rng::stream(cfg.seed, "gen/valid"));
    users.truncate(cfg.valid_users);
    users.sort_unstable();
    let valid = split_examples(ds, Split::Valid, &users, cfg.max_len);
    let examples = make_examples(ds, cfg.max_len);
    let report = fit(&model, ids, sim, |_| examples.clone(), &valid)?;
    Ok((model, report))
}
