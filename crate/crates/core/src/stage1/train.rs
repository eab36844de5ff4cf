use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::{Catalog, SignalForward, Stage1Model};
use super::Stage1Config;
use crate::contrastive::{catalog_hit_rate, left_pad, rec_contrastive_loss};
use crate::data::Dataset;
use crate::disentangle::{club_mim_loss, estimator_nll_loss};
use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::quantizer::{
    kmeans_init, quantize_rows, recon_loss, reseed_dead_codes, residual_lookup, rq_loss, straight_through, CodeUsage,
    Signal,
};
use crate::rng;

/// Loss components averaged over an epoch's steps, plus codebook health.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub rq: f64,
    pub recon: f64,
    pub rec: f64,
    pub mim: f64,
    pub estimator_nll: f64,
    /// Fraction of codes hit per bank and level.
    pub utilization: Vec<Vec<f64>>,
    pub reseeded: usize,
    pub full_collisions: usize,
    /// Early-stopping score (higher is better).
    pub valid_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub signals: Vec<Signal>,
    pub beta: f64,
    pub gamma: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub checksum: String,
}

impl TrainReport {
    /// `1 - final / first` epoch total loss.
    pub fn loss_reduction(&self) -> f64 {
        match (self.epochs.first(), self.epochs.last()) {
            (Some(a), Some(b)) if a.total != 0.0 => 1.0 - b.total / a.total,
            _ => 0.0,
        }
    }

    /// Largest gap between a logged total and its weighted components.
    pub fn decomposition_error(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| (e.total - (e.rq + e.recon + self.beta * e.rec + self.gamma * e.mim)).abs())
            .fold(0.0, f64::max)
    }
}

struct Batch {
    histories: Vec<Vec<u32>>,
    targets: Vec<u32>,
}

/// Shuffles eligible users and draws one cut point per user: the target is
/// a random training position after the first, the history what precedes it.
fn make_batches(ds: &Dataset, cfg: &Stage1Config, epoch: usize) -> Vec<Batch> {
    let mut users: Vec<usize> = (0..ds.sequences.len())
        .filter(|&u| ds.sequences[u].train_items().len() >= 2)
        .collect();
    users.shuffle(&mut rng::stream(cfg.seed, &format!("stage1/shuffle/{epoch}")));
    let mut cut = rng::stream(cfg.seed, &format!("stage1/cut/{epoch}"));
    users
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(|chunk| {
            let mut histories = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &u in chunk {
                let train = ds.sequences[u].train_items();
                let p = cut.random_range(1..train.len());
                histories.push(train[p.saturating_sub(cfg.max_len)..p].to_vec());
                targets.push(train[p]);
            }
            Batch { histories, targets }
        })
        .collect()
}

#[derive(Default)]
struct Sums {
    total: f64,
    rq: f64,
    recon: f64,
    rec: f64,
    mim: f64,
    nll: f64,
    steps: usize,
}

fn add(acc: Option<Tensor>, t: Tensor) -> Result<Option<Tensor>> {
    Ok(Some(match acc {
        None => t,
        Some(a) => (a + t)?,
    }))
}

fn value(t: &Option<Tensor>) -> Result<f64> {
    t.as_ref().map_or(Ok(0.0), scalar)
}

struct StepState {
    usage: Vec<CodeUsage>,
    /// Residual pools of the latest step, per bank and level.
    pool: Vec<Vec<Vec<f64>>>,
}

fn gather_rows(t: &Tensor, rows: &[u32]) -> Result<Tensor> {
    Ok(t.index_select(&Tensor::from_vec(rows.to_vec(), rows.len(), &Device::Cpu)?, 0)?)
}

/// Trains a stage-1 model on the training positions of `ds`. The returned
/// model holds the parameters of the best validation epoch.
pub fn train_stage1(ds: &Dataset, cfg: &Stage1Config) -> Result<(Stage1Model, TrainReport)> {
    cfg.validate()?;
    ds.validate()?;
    let model = Stage1Model::for_dataset(cfg, ds)?;
    let catalog = Catalog::from_dataset(ds, model.store.dtype())?;
    let n_banks = model.codebooks.banks().len();

    if cfg.kmeans_init {
        let signals = model.catalog_signals(&catalog)?;
        let mut sample_rng = rng::stream(cfg.seed, "stage1/kmeans/sample");
        let mut km_rng = rng::stream(cfg.seed, "stage1/kmeans");
        for (b, bank) in model.codebooks.banks().iter().enumerate() {
            let mut rows: Vec<&[f64]> = Vec::new();
            for s in model.codebooks.signals_of_bank(b) {
                let k = model.signals.iter().position(|&x| x == s).expect("signal of bank");
                rows.extend(signals[k].chunks_exact(cfg.dim));
            }
            rows.shuffle(&mut sample_rng);
            rows.truncate(4096);
            let pts: Vec<f64> = rows.concat();
            kmeans_init(&pts, bank, &model.store, &mut km_rng)?;
        }
    }

    let est_vars = model.store.vars_where(|n| n.starts_with(Stage1Model::ESTIMATOR_PREFIX));
    let joint_vars = model.store.vars_where(|n| !n.starts_with(Stage1Model::ESTIMATOR_PREFIX));
    let adam = ParamsAdamW {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut est_opt = if est_vars.is_empty() {
        None
    } else {
        let est = ParamsAdamW {
            lr: cfg.estimator_lr,
            ..adam.clone()
        };
        Some(AdamW::new(est_vars, est)?)
    };
    let mut joint_opt = AdamW::new(joint_vars, adam)?;

    let valid_users = {
        let mut u: Vec<usize> = (0..ds.sequences.len()).collect();
        u.shuffle(&mut rng::stream(cfg.seed, "stage1/valid"));
        u.truncate(cfg.valid_users);
        u.sort_unstable();
        u
    };

    let mut state = StepState {
        usage: (0..n_banks).map(|_| CodeUsage::new(cfg.levels, cfg.codes)).collect(),
        pool: vec![vec![Vec::new(); cfg.levels]; n_banks],
    };
    let mut epochs = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut best_params = model.store.snapshot()?;
    let mut stopped_early = false;
    let mut mim_rng = rng::stream(cfg.seed, "stage1/mim");
    let mut reseed_rng = rng::stream(cfg.seed, "stage1/reseed");

    for epoch in 1..=cfg.max_epochs {
        let mut sums = Sums::default();
        for (step, batch) in make_batches(ds, cfg, epoch).iter().enumerate() {
            let opts = Optimizers {
                estimator: &mut est_opt,
                joint: &mut joint_opt,
            };
            let (total, parts) = train_step(&model, &catalog, cfg, batch, opts, &mut mim_rng, &mut state)
                .map_err(|e| match e {
                    Error::Diverged { what, .. } => Error::Diverged { epoch, step, what },
                    e => e,
                })?;
            sums.total += total;
            sums.rq += parts[0];
            sums.recon += parts[1];
            sums.rec += parts[2];
            sums.mim += parts[3];
            sums.nll += parts[4];
            sums.steps += 1;
        }
        if sums.steps == 0 {
            return Err(Error::EmptyDataset("no user has two training positions".into()));
        }

        let utilization = state.usage.iter().map(CodeUsage::utilization).collect();
        let mut reseeded = 0;
        for (b, bank) in model.codebooks.banks().iter().enumerate() {
            reseeded += reseed_dead_codes(bank, &model.store, &state.usage[b], &state.pool[b], &mut reseed_rng)?;
            state.usage[b].reset();
        }

        let n = sums.steps as f64;
        let total = sums.total / n;
        let codes = model.quantize_catalog(&catalog)?;
        let valid_metric = if cfg.uses_rec() {
            validation_hit_rate(&model, ds, &valid_users, &codes.vectors, codes.width)?
        } else {
            -total
        };
        let log = EpochLog {
            epoch,
            total,
            rq: sums.rq / n,
            recon: sums.recon / n,
            rec: sums.rec / n,
            mim: sums.mim / n,
            estimator_nll: sums.nll / n,
            utilization,
            reseeded,
            full_collisions: codes.table.collision_report().full(),
            valid_metric,
        };
        log::info!(
            "stage1 epoch {epoch}: total {:.4} rq {:.4} recon {:.4} rec {:.4} mim {:.4} valid {:.4} collisions {}",
            log.total,
            log.rq,
            log.recon,
            log.rec,
            log.mim,
            log.valid_metric,
            log.full_collisions
        );
        epochs.push(log);
        if valid_metric > best.0 {
            best = (valid_metric, epoch);
            best_params = model.store.snapshot()?;
        } else if epoch - best.1 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    model.store.restore(&best_params)?;
    let report = TrainReport {
        signals: model.signals.clone(),
        beta: cfg.beta,
        gamma: cfg.gamma,
        epochs,
        best_epoch: best.1,
        stopped_early,
        checksum: model.store.checksum()?,
    };
    Ok((model, report))
}

struct Optimizers<'a> {
    estimator: &'a mut Option<AdamW>,
    joint: &'a mut AdamW,
}

/// One estimator update followed by one joint update. Returns the total
/// and `[rq, recon, rec, mim, estimator_nll]` before the joint update.
fn train_step(
    model: &Stage1Model,
    catalog: &Catalog,
    cfg: &Stage1Config,
    batch: &Batch,
    opts: Optimizers<'_>,
    mim_rng: &mut rng::Rng,
    state: &mut StepState,
) -> Result<(f64, [f64; 5])> {
    let mut unique: Vec<u32> = batch.histories.iter().flatten().chain(&batch.targets).copied().collect();
    unique.sort_unstable();
    unique.dedup();
    let row_of = |item: u32| unique.binary_search(&item).expect("batch item is in the unique set") as u32;
    let fwd = model.forward(&unique, catalog)?;

    let mut mim_rows: Vec<u32> = (0..unique.len() as u32).collect();
    let mut nll_value = 0.0;
    if cfg.uses_mim() {
        mim_rows.shuffle(mim_rng);
        mim_rows.truncate(cfg.mim_sample);
        mim_rows.sort_unstable();
        if let Some(opt) = opts.estimator.as_mut() {
            for _ in 0..cfg.estimator_steps {
                let mut nll = None;
                for (k, est) in model.estimators.iter().enumerate() {
                    let (zb, zs) = mim_inputs(&fwd, k, &mim_rows)?;
                    nll = add(nll, estimator_nll_loss(&zb, &zs, est)?)?;
                }
                nll_value = value(&nll)?;
                if let Some(l) = nll {
                    opt.backward_step(&l)?;
                }
            }
        }
    }

    let banks = model.host_banks()?;
    for p in state.pool.iter_mut() {
        p.iter_mut().for_each(Vec::clear);
    }
    let mut rq = None;
    let mut v_st = Vec::with_capacity(model.signals.len());
    let mut v_rec = Vec::with_capacity(model.signals.len());
    for (s, z) in fwd.z.iter().enumerate() {
        let b = model.codebooks.bank_index(model.signals[s])?;
        let results = quantize_rows(z, &banks[b])?;
        let codes: Vec<Vec<u32>> = results.iter().map(|r| r.codes.clone()).collect();
        for r in &results {
            state.usage[b].record(&r.codes);
            for l in 0..cfg.levels {
                state.pool[b][l].extend_from_slice(&r.residuals[l]);
            }
        }
        let lk = residual_lookup(z, &codes, &model.codebooks.banks()[b])?;
        rq = add(rq, rq_loss(&lk, cfg.alpha)?)?;
        v_st.push(straight_through(z, &lk.quantized)?);
        v_rec.push(if cfg.freeze_codebook_from_rec {
            straight_through(z, &lk.quantized.detach())?
        } else {
            v_st[s].clone()
        });
    }

    let mut recon = None;
    for (k, dec) in model.decoders.iter().enumerate() {
        let s = model
            .signals
            .iter()
            .position(|x| x.modality() == Some(dec.modality))
            .expect("decoded modality is a signal");
        let x_hat = dec.reconstruct(&v_st[s], fwd.specific[k].as_ref())?;
        recon = add(recon, recon_loss(&fwd.inputs[k], &x_hat)?)?;
    }

    let mut mim = None;
    if cfg.uses_mim() {
        for (k, est) in model.estimators.iter().enumerate() {
            let (zb, zs) = mim_inputs(&fwd, k, &mim_rows)?;
            let zb = if cfg.mim_into_behavior { zb } else { zb.detach() };
            mim = add(mim, club_mim_loss(&zb, &zs, est)?)?;
        }
    }

    let mut rec = None;
    if let Some(seq) = &model.seq {
        let v = Tensor::cat(&v_rec, 1)?;
        let rows: Vec<Vec<u32>> = batch.histories.iter().map(|h| h.iter().map(|&i| row_of(i)).collect()).collect();
        let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
        let (idx, valid, t) = left_pad(&refs);
        let hist = gather_rows(&v, &idx)?.reshape((rows.len(), t, v.dims()[1]))?;
        let h = seq.encode(&hist, &valid)?;
        let target_rows: Vec<u32> = batch.targets.iter().map(|&i| row_of(i)).collect();
        let pos = gather_rows(&v, &target_rows)?;
        rec = Some(rec_contrastive_loss(&h, &pos, &batch.targets, cfg.tau)?);
    }

    let parts = [value(&rq)?, value(&recon)?, value(&rec)?, value(&mim)?, nll_value];
    let mut total = rq.expect("at least one signal");
    if let Some(r) = recon {
        total = (total + r)?;
    }
    if let Some(r) = rec {
        total = (total + (r * cfg.beta)?)?;
    }
    if let Some(m) = mim {
        total = (total + (m * cfg.gamma)?)?;
    }
    let total_value = scalar(&total)?;
    if !total_value.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            what: "total loss".into(),
        });
    }
    opts.joint.backward_step(&total)?;
    // logged in f64 so it matches the logged components exactly
    let logged = parts[0] + parts[1] + cfg.beta * parts[2] + cfg.gamma * parts[3];
    Ok((logged, parts))
}

fn mim_inputs(fwd: &SignalForward, k: usize, rows: &[u32]) -> Result<(Tensor, Tensor)> {
    let zs = fwd.specific[k]
        .as_ref()
        .ok_or_else(|| Error::Config("mutual-information loss needs specific encoders".into()))?;
    Ok((gather_rows(&fwd.behavior[k], rows)?, gather_rows(zs, rows)?))
}

/// Top-10 catalog hit rate of the validation targets.
fn validation_hit_rate(model: &Stage1Model, ds: &Dataset, users: &[usize], vectors: &[f64], width: usize) -> Result<f64> {
    let seq = model.seq.as_ref().expect("validation needs the sequence encoder");
    let n = ds.n_items();
    let dtype = model.store.dtype();
    let catalog = Tensor::from_vec(vectors.to_vec(), (n, width), &Device::Cpu)?.to_dtype(dtype)?;
    let mut hits = 0.0;
    let mut count = 0usize;
    for chunk in users.chunks(256) {
        let hists: Vec<&[u32]> = chunk
            .iter()
            .map(|&u| {
                let h = ds.sequences[u].train_items();
                &h[h.len().saturating_sub(model.cfg.max_len)..]
            })
            .collect();
        let (idx, valid, t) = left_pad(&hists);
        let hist = gather_rows(&catalog, &idx)?.reshape((chunk.len(), t, width))?;
        let h = seq.encode(&hist, &valid)?;
        let targets: Vec<u32> = chunk.iter().map(|&u| ds.sequences[u].valid_target()).collect();
        hits += catalog_hit_rate(&h, &catalog, &targets, 10)? * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(hits / count.max(1) as f64)
}
