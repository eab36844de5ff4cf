//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.
//!
//! `cargo test -p semrec-cli --test acceptance -- 1 4 8` runs a subset.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use semrec_core::contrastive::rec_contrastive_loss;
use semrec_core::data::{synthesize, Dataset, SynthConfig};
use semrec_core::disentangle::{club_mim_loss, GaussianEstimator, Modality, ModalityEncoders};
use semrec_core::eval::{ndcg_at_k, recall_at_k, run_ablation_suite, tokenize, EvalConfig, RankedLists, SuiteConfig, Tokenized, Variant};
use semrec_core::generator::{
    bucket, fit, generate, make_examples, BeamConfig, Decoding, Example, Generator, GeneratorConfig, SimAttention, SimilarityEmbedding,
    SimilarityTable, TokenSpace,
};
use semrec_core::gradcheck::{numeric_grad, relative_error};
use semrec_core::nn::{attention_mask, scalar, to_f64_vec, ParamStore, MASK_NEG};
use semrec_core::quantizer::{residual_lookup, rq_loss, rq_quantize, CodebookBank, HostBank, SemanticIdTable, Signal};
use semrec_core::rng;
use semrec_core::stage1::Stage1Config;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn randn(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

// 1 -------------------------------------------------------------------------

fn quantization() -> Check {
    let (n, d, codes, levels) = (1000, 128, 256, 3);
    let mut r = rng::stream(1, "acceptance/rq");
    // shrinking scale per level, as a trained residual codebook would have
    let mut data = Vec::with_capacity(levels * codes * d);
    for l in 0..levels {
        let s = 0.5f64.powi(l as i32);
        data.extend(randn(&mut r, codes * d).into_iter().map(|x| x * s));
    }
    let bank = HostBank { levels, codes, dim: d, data };
    let z: Vec<Vec<f64>> = (0..n).map(|_| randn(&mut r, d)).collect();

    let start = Instant::now();
    let out: Vec<_> = z.iter().map(|v| rq_quantize(v, &bank).unwrap()).collect();
    let secs = start.elapsed().as_secs_f64();

    let (mut code_mismatch, mut worst) = (0, 0.0f64);
    for (v, q) in z.iter().zip(&out) {
        let mut res = v.clone();
        for l in 0..levels {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..codes {
                let e = &bank.data[(l * codes + c) * d..(l * codes + c + 1) * d];
                let dist = sq_dist(&res, e);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if q.codes[l] != best as u32 {
                code_mismatch += 1;
            }
            let e = &bank.data[(l * codes + best) * d..(l * codes + best + 1) * d];
            res.iter_mut().zip(e).for_each(|(x, y)| *x -= y);
        }
        let recon: Vec<f64> = v.iter().zip(&q.quantized).map(|(a, b)| a - b).collect();
        for ((a, b), c) in q.final_residual().iter().zip(&res).zip(&recon) {
            worst = worst.max((a - b).abs()).max((a - c).abs());
        }
    }
    ensure(
        code_mismatch == 0 && worst < 1e-6 && secs < 60.0,
        format!("{code_mismatch} code mismatches, max residual error {worst:.2e}, {secs:.2}s"),
    )
}

// 2 -------------------------------------------------------------------------

fn gradients() -> Check {
    let mut worst: HashMap<&str, f64> = HashMap::new();
    let mut bump = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for inst in 0..10u64 {
        let mut r = rng::stream(inst, "acceptance/grad");
        let (b, d, levels, codes) = (5, 4, 3, 6);

        // RQ loss: codebook path with residuals held fixed, encoder path with
        // selected codes held fixed, mirroring the stop-gradients.
        let bank = Var::from_tensor(&tensor(randn(&mut r, levels * codes * d), &[levels, codes, d])).unwrap();
        let z = Var::from_tensor(&tensor(randn(&mut r, b * d), &[b, d])).unwrap();
        let assign: Vec<Vec<u32>> = (0..b).map(|_| (0..levels).map(|_| r.random_range(0..codes as u32)).collect()).collect();
        let alpha = 0.25;
        let cb = CodebookBank::from_entries(bank.as_tensor().clone()).unwrap();
        let lk = residual_lookup(z.as_tensor(), &assign, &cb).unwrap();
        let g = rq_loss(&lk, alpha).unwrap().backward().unwrap();
        let zs = to_f64_vec(z.as_tensor()).unwrap();
        let entries = |e: &Tensor, l: usize, c: u32| -> Vec<f64> {
            e.get(l).unwrap().get(c as usize).unwrap().to_vec1::<f64>().unwrap()
        };
        // residual chain through the fixed assignment, evaluated on the host
        let chain = |e: &Tensor, zv: &[f64]| -> Vec<Vec<Vec<f64>>> {
            (0..b)
                .map(|i| {
                    let mut res = zv[i * d..(i + 1) * d].to_vec();
                    let mut out = Vec::new();
                    for l in 0..levels {
                        out.push(res.clone());
                        let c = entries(e, l, assign[i][l]);
                        res.iter_mut().zip(&c).for_each(|(x, y)| *x -= y);
                    }
                    out
                })
                .collect()
        };
        let base = chain(bank.as_tensor(), &zs);
        let f_bank = |e: &Tensor| {
            let mut t = 0.0;
            for i in 0..b {
                for l in 0..levels {
                    t += sq_dist(&base[i][l], &entries(e, l, assign[i][l]));
                }
            }
            Ok(t / b as f64)
        };
        let num = numeric_grad(bank.as_tensor(), 1e-6, f_bank).unwrap();
        bump("rq", relative_error(&to_f64_vec(g.get(bank.as_tensor()).unwrap()).unwrap(), &num));
        let f_z = |zz: &Tensor| {
            let zv = to_f64_vec(zz)?;
            let mut t = 0.0;
            for i in 0..b {
                let mut res = zv[i * d..(i + 1) * d].to_vec();
                for l in 0..levels {
                    let c = entries(bank.as_tensor(), l, assign[i][l]);
                    t += sq_dist(&res, &c);
                    res.iter_mut().zip(&c).for_each(|(x, y)| *x -= y);
                }
            }
            Ok(alpha * t / b as f64)
        };
        let num = numeric_grad(z.as_tensor(), 1e-6, f_z).unwrap();
        bump("rq", relative_error(&to_f64_vec(g.get(z.as_tensor()).unwrap()).unwrap(), &num));

        // MIM: through encoders and the variational estimator
        let store = ParamStore::new(100 + inst, DType::F64);
        let enc = ModalityEncoders::new(&store, Modality::Text, 6, 3, true).unwrap();
        let est = GaussianEstimator::new(&store, "est.text", 3).unwrap();
        let x = Var::from_tensor(&tensor(randn(&mut r, 4 * 6), &[4, 6])).unwrap();
        let mim = |x: &Tensor| {
            let o = enc.encode_pair(x)?;
            club_mim_loss(&o.z_behavior, o.z_specific.as_ref().unwrap(), &est)
        };
        let g = mim(x.as_tensor()).unwrap().backward().unwrap();
        let num = numeric_grad(x.as_tensor(), 1e-6, |t| scalar(&mim(t)?)).unwrap();
        bump("mim", relative_error(&to_f64_vec(g.get(x.as_tensor()).unwrap()).unwrap(), &num));

        // Rec: both the sequence side and the item side
        let h = Var::from_tensor(&tensor(randn(&mut r, b * d), &[b, d])).unwrap();
        let v = Var::from_tensor(&tensor(randn(&mut r, b * d), &[b, d])).unwrap();
        let targets: Vec<u32> = (0..b).map(|_| r.random_range(0..4)).collect();
        let g = rec_contrastive_loss(h.as_tensor(), v.as_tensor(), &targets, 0.1).unwrap().backward().unwrap();
        let num = numeric_grad(h.as_tensor(), 1e-6, |t| scalar(&rec_contrastive_loss(t, v.as_tensor(), &targets, 0.1)?)).unwrap();
        bump("rec", relative_error(&to_f64_vec(g.get(h.as_tensor()).unwrap()).unwrap(), &num));
        let num = numeric_grad(v.as_tensor(), 1e-6, |t| scalar(&rec_contrastive_loss(h.as_tensor(), t, &targets, 0.1)?)).unwrap();
        bump("rec", relative_error(&to_f64_vec(g.get(v.as_tensor()).unwrap()).unwrap(), &num));
    }
    let ok = worst.values().all(|e| *e < 1e-4);
    ensure(
        ok,
        format!("max rel err: RQ {:.1e}, MIM {:.1e}, Rec {:.1e} over 10 instances", worst["rq"], worst["mim"], worst["rec"]),
    )
}

// 3 -------------------------------------------------------------------------

fn club_zero() -> Check {
    let mut r = rng::stream(3, "acceptance/club");
    let store = ParamStore::new(3, DType::F64);
    let est = GaussianEstimator::new(&store, "est", 8).unwrap();
    let single = scalar(&club_mim_loss(&tensor(randn(&mut r, 8), &[1, 8]), &tensor(randn(&mut r, 8), &[1, 8]), &est).unwrap()).unwrap();
    let row = randn(&mut r, 8);
    let same: Vec<f64> = (0..16).flat_map(|_| row.clone()).collect();
    let identical = scalar(&club_mim_loss(&tensor(randn(&mut r, 16 * 8), &[16, 8]), &tensor(same, &[16, 8]), &est).unwrap()).unwrap();
    ensure(single == 0.0 && identical == 0.0, format!("N_B=1 -> {single}, identical batch -> {identical}"))
}

// 4 -------------------------------------------------------------------------

/// Plain multi-head attention on the host, token by token.
fn host_attention(att: &SimAttention, x: &[f64], t: usize, dim: usize, valid: &[bool]) -> Vec<f64> {
    let lin = |l: &candle_nn::Linear, v: &[f64]| -> Vec<f64> {
        let w = l.weight().to_vec2::<f64>().unwrap();
        let b = l.bias().unwrap().to_vec1::<f64>().unwrap();
        w.iter().zip(&b).map(|(row, bi)| bi + row.iter().zip(v).map(|(a, c)| a * c).sum::<f64>()).collect()
    };
    let rows: Vec<&[f64]> = x.chunks(dim).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|r| lin(&att.mha.q, r)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| lin(&att.mha.k, r)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| lin(&att.mha.v, r)).collect();
    let h = att.mha.heads;
    let dh = dim / h;
    let mut out = Vec::new();
    for i in 0..t {
        let mut merged = vec![0.0; dim];
        for head in 0..h {
            let span = head * dh..(head + 1) * dh;
            let s: Vec<f64> = (0..t)
                .map(|j| {
                    let dot: f64 = q[i][span.clone()].iter().zip(&k[j][span.clone()]).map(|(a, b)| a * b).sum();
                    dot / (dh as f64).sqrt() + if valid[j] { 0.0 } else { MASK_NEG }
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..t {
                for c in span.clone() {
                    merged[c] += e[j] / z * v[j][c];
                }
            }
        }
        out.extend(lin(&att.mha.o, &merged));
    }
    out
}

fn ones_attention() -> Check {
    let (dim, heads, levels, items, k) = (16, 4, 3, 5, 100u16);
    let store = ParamStore::new(4, DType::F64);
    let att = SimAttention::new(&store, "enc.0.attn", dim, heads).unwrap();
    let ones = SimilarityEmbedding::ones(&store, k, dim).unwrap();
    let mut r = rng::stream(4, "acceptance/attn");
    let t = items * levels;
    let mut worst = 0.0f64;
    for seq in 0..20 {
        let x = randn(&mut r, t * dim);
        let pad = seq % items;
        let valid: Vec<bool> = (0..t).map(|i| i >= pad * levels).collect();
        let buckets: Vec<u32> = (0..items * items).map(|_| r.random_range(0..=k as u32)).collect();
        let sim = ones.lookup(&Tensor::from_vec(buckets, (1, items, items), &Device::Cpu).unwrap()).unwrap();
        let mask = attention_mask(&[valid.clone()], t, false, DType::F64, &Device::Cpu).unwrap();
        let got = to_f64_vec(&att.forward(&tensor(x.clone(), &[1, t, dim]), Some(&mask), levels, Some(&sim)).unwrap()).unwrap();
        let want = host_attention(&att, &x, t, dim, &valid);
        for (i, (a, b)) in got.iter().zip(&want).enumerate() {
            if valid[i / dim] {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let b = [bucket(-1.0, k), bucket(0.0, k), bucket(1.0, k)];
    ensure(
        worst < 1e-6 && b == [0, 50, 100],
        format!("max |diff| {worst:.2e} over 20 sequences; buckets(-1,0,1) = {b:?}"),
    )
}

// 5 -------------------------------------------------------------------------

fn beam_exactness() -> Check {
    let (n, levels, items) = (8usize, 2usize, 64usize);
    let signals = [Signal::Id, Signal::Text];
    let mut r = rng::stream(5, "acceptance/beam");
    // every item gets a distinct full ID
    let mut pool: Vec<usize> = (0..n.pow(4)).collect();
    for i in 0..items {
        let j = r.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let digits = |x: usize| -> Vec<u32> { (0..4).map(|p| ((x / n.pow(3 - p as u32)) % n) as u32).collect() };
    let per: Vec<Vec<Vec<u32>>> = (0..2)
        .map(|s| {
            (0..items)
                .map(|i| {
                    let c = digits(pool[i]);
                    // layout per level: [id, text]
                    (0..levels).map(|l| c[l * 2 + s]).collect()
                })
                .collect()
        })
        .collect();
    let ids = SemanticIdTable::from_signal_codes(&signals, levels, n, &per).unwrap();
    let vecs = randn(&mut r, items * 4);
    let sim = SimilarityTable::build(&vecs, 4, 10).unwrap();
    let cfg = GeneratorConfig {
        model_dim: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_dim: 32,
        max_len: 5,
        k: 10,
        sim_layers: 1,
        batch_size: 16,
        lr: 5e-3,
        max_epochs: 30,
        patience: 30,
        seed: 5,
        ..Default::default()
    };
    let model = Generator::new(&cfg, TokenSpace::of(&ids), None, DType::F64).unwrap();
    // item i is followed by item (3i + 1) mod 64
    let examples: Vec<Example> = (0..items as u32)
        .map(|i| Example {
            history: vec![(i + 7) % items as u32, i],
            target: (3 * i + 1) % items as u32,
        })
        .collect();
    let report = fit(&model, &ids, &sim, |_| examples.clone(), &examples).map_err(|e| e.to_string())?;
    let trained = report.epochs.last().map_or(0.0, |e| e.valid_accuracy);

    let dec = Decoding::new(&ids, &sim, false);
    let bc = BeamConfig {
        beam_size: 64,
        top_k: 10,
        constrained: false,
    };
    let mut mismatched = 0;
    let mut worst = 0.0f64;
    let probes = [0u32, 13, 42];
    for &p in &probes {
        let hist: Vec<u32> = examples[p as usize].history.clone();
        let enc = model.encode(&[hist.as_slice()], &ids, &sim).unwrap();
        // exhaustive scoring of all n^4 sequences
        let mut all: Vec<(f64, Vec<u32>)> = Vec::with_capacity(n.pow(4));
        let first = model.next_log_probs(&enc, &[vec![]], 0).unwrap();
        let f: Vec<Vec<f64>> = first.iter().map(|t| to_f64_vec(t).unwrap()).collect();
        for a in 0..n {
            for b in 0..n {
                let prefix = vec![a as u32, b as u32];
                let second = model.next_log_probs(&enc, &[prefix.clone()], 1).unwrap();
                let s: Vec<Vec<f64>> = second.iter().map(|t| to_f64_vec(t).unwrap()).collect();
                for c in 0..n {
                    for d in 0..n {
                        all.push((f[0][a] + f[1][b] + s[0][c] + s[1][d], vec![a as u32, b as u32, c as u32, d as u32]));
                    }
                }
            }
        }
        all.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let res = &generate(&model, &dec, &[hist.as_slice()], &bc).unwrap()[0];
        for (beam, (lp, codes)) in res.beams.iter().take(10).zip(&all) {
            if &beam.codes != codes {
                mismatched += 1;
            }
            worst = worst.max((beam.log_prob - lp).abs());
        }
        if res.beams.len() < 10 {
            mismatched += 10 - res.beams.len();
        }
    }
    ensure(
        mismatched == 0 && worst < 1e-9,
        format!(
            "{} histories, {mismatched} of {} top-10 positions differ from 4096-way enumeration, max log-prob diff {worst:.1e} (train acc {trained:.2})",
            probes.len(),
            probes.len() * 10
        ),
    )
}

// 6 and 10 -------------------------------------------------------------------

struct DefaultRun {
    ds: Dataset,
    tok: Tokenized,
    secs: f64,
}

fn default_run() -> DefaultRun {
    let ds = synthesize(&SynthConfig::default()).unwrap().dataset;
    let start = Instant::now();
    let tok = tokenize(&ds, &Stage1Config::default()).unwrap();
    DefaultRun {
        ds,
        tok,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn collisions(run: &DefaultRun) -> Check {
    let table = &run.tok.codes.table;
    let n = table.n_items();
    // independent scan: every item whose full ID also belongs to another item
    let mut groups: HashMap<&[u32], usize> = HashMap::new();
    for i in 0..n {
        *groups.entry(table.item(i)).or_default() += 1;
    }
    let dup: usize = groups.values().filter(|&&c| c > 1).sum();
    let reported = table.collision_report().full();
    let rate = dup as f64 / n as f64;
    ensure(
        rate <= 0.005 && dup == reported && table.levels == 3,
        format!("{dup} of {n} items collide ({:.2}%), report says {reported}", 100.0 * rate),
    )
}

fn convergence(run: &DefaultRun) -> Check {
    let rep = &run.tok.report;
    let first = rep.epochs.first().map_or(f64::NAN, |e| e.total);
    let last = rep.epochs.last().map_or(f64::NAN, |e| e.total);
    let reduction = rep.loss_reduction();

    let ids = &run.tok.codes.table;
    let sim = SimilarityTable::build(&run.tok.codes.vectors, run.tok.codes.width, 100).unwrap();
    let cfg = GeneratorConfig {
        model_dim: 48,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_dim: 96,
        max_len: 5,
        sim_layers: 1,
        batch_size: 8,
        lr: 1e-2,
        max_epochs: 200,
        patience: 200,
        ..Default::default()
    };
    let model = Generator::new(&cfg, TokenSpace::of(ids), None, DType::F32).unwrap();
    let examples: Vec<Example> = make_examples(&run.ds, cfg.max_len).into_iter().step_by(997).take(8).collect();
    let report = fit(&model, ids, &sim, |_| examples.clone(), &examples).map_err(|e| e.to_string())?;
    let acc = report.epochs.iter().map(|e| e.valid_accuracy).fold(0.0, f64::max);
    ensure(
        reduction >= 0.5 && acc == 1.0,
        format!(
            "stage-1 L_total {first:.3} -> {last:.3} ({:.1}% lower, {} epochs, {:.0}s); stage-2 overfit accuracy {:.3} on {} examples",
            100.0 * reduction,
            rep.epochs.len(),
            run.secs,
            acc,
            examples.len()
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn ablation() -> Check {
    let ds = synthesize(&SynthConfig {
        n_items: 500,
        n_users: 1500,
        n_clusters: 25,
        ..Default::default()
    })
    .unwrap()
    .dataset;
    let suite = SuiteConfig {
        variants: vec![Variant::Full, Variant::NoMim, Variant::NoRec, Variant::NoUnified, Variant::S, Variant::E],
        seeds: vec![1, 2, 3],
        sweeps: vec![],
        stage1: Stage1Config {
            codes: 64,
            dim: 32,
            seq_dim: 32,
            batch_size: 64,
            max_epochs: 30,
            ..Default::default()
        },
        generator: GeneratorConfig {
            model_dim: 48,
            ff_dim: 96,
            max_len: 8,
            batch_size: 128,
            max_epochs: 12,
            patience: 3,
            ..Default::default()
        },
        eval: EvalConfig {
            max_users: Some(1000),
            ..Default::default()
        },
    };
    let rep = run_ablation_suite(&ds, &suite).map_err(|e| e.to_string())?;
    let m = rep.ablation.ok_or("no ablation report")?;
    let key = "R@10";
    let full = m.summary.iter().find(|s| s.variant == "full").ok_or("no full run")?.mean[key];
    let mut not_above = Vec::new();
    let mut significant = 0;
    let mut parts = vec![format!("full {full:.4}")];
    for s in m.summary.iter().filter(|s| s.variant != "full") {
        let mean = s.mean[key];
        let gap = s.gap.get(key).copied().unwrap_or(f64::NAN);
        let p = s.p_value.get(key).copied().unwrap_or(f64::NAN);
        if full < mean {
            not_above.push(s.variant.clone());
        }
        if gap > 0.0 && p < 0.05 {
            significant += 1;
        }
        parts.push(format!("{} {mean:.4} (p={p:.3})", s.variant));
    }
    ensure(
        not_above.is_empty() && significant >= 3,
        format!(
            "mean R@10 over 3 seeds: {}; {significant}/5 significant positive gaps; full below: {:?}; {:.0}s",
            parts.join(", "),
            not_above,
            rep.elapsed_s
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn metrics() -> Check {
    let mut r = rng::stream(8, "acceptance/metrics");
    let (users, depth, items) = (300, 20, 60u32);
    let mut lists = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..users {
        let mut pool: Vec<u32> = (0..items).collect();
        for i in 0..depth {
            let j = r.random_range(i..pool.len());
            pool.swap(i, j);
        }
        lists.push(pool[..r.random_range(0..=depth)].to_vec());
        targets.push(r.random_range(0..items));
    }
    let ranked = RankedLists::new(depth, lists.clone()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for k in [1, 5, 10, 20] {
        let (mut rec, mut ndcg) = (0.0, 0.0);
        for (l, t) in lists.iter().zip(&targets) {
            if let Some(pos) = l.iter().take(k).position(|x| x == t) {
                rec += 1.0;
                ndcg += 1.0 / ((pos + 2) as f64).log2();
            }
        }
        rec /= users as f64;
        ndcg /= users as f64;
        worst = worst
            .max((recall_at_k(&ranked, &targets, k).unwrap() - rec).abs())
            .max((ndcg_at_k(&ranked, &targets, k).unwrap() - ndcg).abs());
    }
    let two = RankedLists::new(10, vec![vec![4, 9, 1]]).unwrap();
    let n2 = ndcg_at_k(&two, &[9], 10).unwrap();
    let want = 1.0 / 3f64.log2();
    ensure(
        worst < 1e-12 && (n2 - want).abs() < 1e-15,
        format!("max |diff| vs oracle {worst:.1e}; rank-2 NDCG {n2:.12} vs {want:.12}"),
    )
}

// 9 -------------------------------------------------------------------------

const TINY_CONFIG: &str = r#"
[synth]
n_items = 120
n_users = 200
n_clusters = 8

[stage1]
codes = 16
dim = 16
seq_dim = 16
max_epochs = 3
batch_size = 64
valid_users = 64

[generator]
model_dim = 24
heads = 2
encoder_layers = 1
decoder_layers = 1
ff_dim = 48
max_len = 6
k = 20
sim_layers = 1
max_epochs = 2
batch_size = 32
valid_users = 32

[eval]
ks = [5, 10]
beam_size = 10
"#;

fn cli(root: &Path, cfg: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_semrec"))
        .args(["--workers", "1", "--config"])
        .arg(cfg)
        .args(args)
        .env("SEMREC_DATA_ROOT", root)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("semrec {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(root: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let cfg = root.join("config.toml");
    std::fs::write(&cfg, TINY_CONFIG).map_err(|e| e.to_string())?;
    for cmd in [&["synth"][..], &["train-quant"], &["assign-ids"], &["train-gen"], &["evaluate"]] {
        cli(root, &cfg, cmd)?;
    }
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok((read(&root.join("generator/eval/metrics.json"))?, read(&root.join("ids/semantic_ids.tsv"))?))
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ma, ia) = pipeline(a.path())?;
    let (mb, ib) = pipeline(b.path())?;
    ensure(
        ma == mb && ia == ib && !ma.is_empty(),
        format!(
            "synth -> train-quant -> assign-ids -> train-gen -> evaluate twice: metrics.json {} ({} bytes), semantic IDs {}",
            if ma == mb { "identical" } else { "differ" },
            ma.len(),
            if ia == ib { "identical" } else { "differ" }
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |i: usize| wanted.is_empty() || wanted.contains(&i);
    let mut failed = 0;
    let mut report = |i: usize, name: &str, f: &mut dyn FnMut() -> Check| {
        if !on(i) {
            return;
        }
        let start = Instant::now();
        let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(msg) => println!("PASS {i:>2} {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {i:>2} {name}: {msg} [{secs:.1}s]");
            }
        }
    };
    report(1, "residual quantization", &mut quantization);
    report(2, "finite-difference gradients", &mut gradients);
    report(3, "CLUB degenerate batches", &mut club_zero);
    report(4, "ones-table attention and buckets", &mut ones_attention);
    report(5, "beam search vs enumeration", &mut beam_exactness);
    let shared = std::cell::OnceCell::new();
    report(6, "semantic ID collisions", &mut || collisions(shared.get_or_init(default_run)));
    report(7, "ablation ordering", &mut ablation);
    report(8, "ranking metrics", &mut metrics);
    report(9, "CLI determinism", &mut determinism);
    report(10, "training convergence", &mut || convergence(shared.get_or_init(default_run)));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
