use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use semrec_core::artifacts::{read_json, write_json, RunManifest};
use semrec_core::data::{ingest, synthesize, Dataset, Split};
use semrec_core::eval::{
    metrics_of, plot_lines, plot_sweep, plot_variant_bars, rank_users, rankings_jsonl, run_ablation_suite, tokenize, IdBundle,
    MetricReport, SuiteConfig, SuiteReport, Sweep, SweepParam, Variant,
};
use semrec_core::generator::{benchmark_inference, train_generator, Decoding, GenTrainReport, Generator};
use semrec_core::quantizer::SemanticIdTable;
use semrec_core::stage1::TrainReport;
use semrec_core::{Error, Result};

use crate::config::{or_default, FileConfig};
use crate::{Cli, Command, SplitArg};

const IDS_SUBDIR: &str = "ids";

fn manifest(command: &str, config: serde_json::Value) -> RunManifest {
    RunManifest::new(command, std::env::args().skip(1).collect(), config)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ds = Dataset::load(dir)?;
    ds.validate()?;
    Ok(ds)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Ingest(a) => {
            let mut cfg = file.ingest.clone();
            if let Some(v) = a.min_count {
                cfg.min_count = v;
            }
            if let Some(v) = a.max_len {
                cfg.max_len = v;
            }
            let out = or_default(&a.out, "dataset");
            let (ds, report) = ingest(&a.events, &a.text, &a.image, &cfg)?;
            ds.save(&out)?;
            write_json(&out.join("ingest_report.json"), &report)?;
            if report.rejected_rows > 0 {
                log::warn!("{} event rows reference unknown items", report.rejected_rows);
            }
            let mut m = manifest("ingest", serde_json::to_value(&cfg)?);
            m.dataset_hash = Some(ds.content_hash()?);
            m.finish(&out)?;
            println!("{}", serde_json::to_string_pretty(&report.stats)?);
        }
        Command::Synth(a) => {
            let mut cfg = file.synth.clone();
            if let Some(v) = a.items {
                cfg.n_items = v;
            }
            if let Some(v) = a.users {
                cfg.n_users = v;
            }
            if let Some(v) = a.clusters {
                cfg.n_clusters = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(v) = a.noise_scale {
                cfg.noise_scale = v;
            }
            let out = or_default(&a.out, "dataset");
            let corpus = synthesize(&cfg)?;
            corpus.dataset.save(&out)?;
            write_json(&out.join("synth_config.json"), &cfg)?;
            let mut m = manifest("synth", serde_json::to_value(&cfg)?);
            m.dataset_hash = Some(corpus.dataset.content_hash()?);
            m.seed = Some(cfg.seed);
            m.finish(&out)?;
            println!("{}", serde_json::to_string_pretty(&corpus.dataset.stats())?);
        }
        Command::TrainQuant(a) => {
            let mut cfg = file.stage1.clone();
            a.stage1.apply(&mut cfg, a.seed);
            let ds = load_dataset(&or_default(&a.data, "dataset"))?;
            let out = or_default(&a.out, "stage1");
            let tok = tokenize(&ds, &cfg)?;
            tok.model.save(&out)?;
            write_json(&out.join("train_report.json"), &tok.report)?;
            let mut m = manifest("train-quant", serde_json::to_value(&cfg)?);
            m.dataset_hash = Some(ds.content_hash()?);
            m.seed = Some(cfg.seed);
            m.finish(&out)?;
            let last = tok.report.epochs.last();
            println!(
                "trained {} epochs (best {}), loss reduction {:.1}%, utilization {:?}",
                tok.report.epochs.len(),
                tok.report.best_epoch,
                tok.report.loss_reduction() * 100.0,
                last.map(|e| &e.utilization)
            );
        }
        Command::AssignIds(a) => {
            let ds = load_dataset(&or_default(&a.data, "dataset"))?;
            let ckpt = or_default(&a.checkpoint, "stage1");
            let out = or_default(&a.out, "ids");
            let model = semrec_core::stage1::Stage1Model::load(&ckpt)?;
            if model.shape.n_items != ds.n_items() {
                return Err(Error::Misaligned(format!(
                    "checkpoint was trained on {} items, dataset has {}",
                    model.shape.n_items,
                    ds.n_items()
                )));
            }
            let catalog = semrec_core::stage1::Catalog::from_dataset(&ds, model.store.dtype())?;
            let codes = model.quantize_catalog(&catalog)?;
            let (codebook, codebook_dim) = semrec_core::eval::inherit_vectors(&model)?;
            let bundle = IdBundle {
                codes,
                codebook,
                codebook_dim,
            };
            bundle.save(&out)?;
            let audit = audit(&bundle.codes.table);
            write_json(&out.join("collision_audit.json"), &audit)?;
            let mut m = manifest("assign-ids", json!({ "checkpoint": ckpt, "stage1": model.cfg }));
            m.dataset_hash = Some(ds.content_hash()?);
            m.seed = Some(model.cfg.seed);
            m.finish(&out)?;
            println!("{}", serde_json::to_string_pretty(&audit)?);
        }
        Command::Collisions(a) => {
            let dir = or_default(&a.ids, "ids");
            let table = SemanticIdTable::load(&dir)?;
            let audit = audit(&table);
            if let Some(out) = &a.out {
                write_json(&out.join("collision_audit.json"), &audit)?;
                manifest("collisions", json!({ "ids": dir })).finish(out)?;
            }
            println!("{}", serde_json::to_string_pretty(&audit)?);
            if audit["consistent"] != json!(true) {
                return Err(Error::Precondition("collision report disagrees with the duplicate scan".into()));
            }
        }
        Command::TrainGen(a) => {
            let mut cfg = file.generator.clone();
            a.gen.apply(&mut cfg, a.seed);
            let ds = load_dataset(&or_default(&a.data, "dataset"))?;
            let ids_dir = or_default(&a.ids, "ids");
            let out = or_default(&a.out, "generator");
            let ids = IdBundle::load(&ids_dir)?;
            let sim = ids.similarity(cfg.k)?;
            let inherit = cfg.inherit_codebooks.then(|| (ids.codebook.as_slice(), ids.codebook_dim));
            let (model, report) = train_generator(&ds, &ids.codes.table, &sim, &cfg, inherit)?;
            model.save(&out)?;
            ids.save(&out.join(IDS_SUBDIR))?;
            write_json(&out.join("train_report.json"), &report)?;
            let mut m = manifest("train-gen", serde_json::to_value(&cfg)?);
            m.dataset_hash = Some(ds.content_hash()?);
            m.seed = Some(cfg.seed);
            m.finish(&out)?;
            let best = &report.epochs[report.best_epoch.max(1) - 1];
            println!(
                "trained {} epochs (best {}), valid loss {:.4}, valid code accuracy {:.4}",
                report.epochs.len(),
                report.best_epoch,
                best.valid_loss,
                best.valid_accuracy
            );
        }
        Command::Evaluate(a) => {
            let mut cfg = file.eval.clone();
            a.eval.apply(&mut cfg);
            cfg.validate()?;
            let ds = load_dataset(&or_default(&a.data, "dataset"))?;
            let ckpt = or_default(&a.checkpoint, "generator");
            let out = a.out.clone().unwrap_or_else(|| ckpt.join("eval"));
            let model = Generator::load(&ckpt)?;
            let ids = IdBundle::load(&ckpt.join(IDS_SUBDIR))?;
            let sim = ids.similarity(model.cfg.k)?;
            let dec = Decoding::new(&ids.codes.table, &sim, cfg.constrained);
            let split = match a.split {
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            let users = cfg.users(&ds, split);
            let rankings = rank_users(&model, &dec, &ds, split, &users, &cfg)?;
            let run = metrics_of("checkpoint", model.cfg.seed, &rankings, &cfg)?;
            let report = MetricReport::from_runs(vec![run], "checkpoint")?;
            write_json(&out.join("metrics.json"), &report.summary_json())?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
            write_text(&out.join("rankings.jsonl"), &rankings_jsonl(&rankings)?)?;
            let mut m = manifest("evaluate", json!({ "checkpoint": ckpt, "split": format!("{split:?}"), "eval": cfg }));
            m.dataset_hash = Some(ds.content_hash()?);
            m.seed = Some(model.cfg.seed);
            m.finish(&out)?;
            println!("{}", serde_json::to_string_pretty(&report.runs[0].metrics)?);
        }
        Command::Ablate(a) => {
            let mut stage1 = file.stage1.clone();
            a.stage1.apply(&mut stage1, None);
            let mut generator = file.generator.clone();
            a.gen.apply(&mut generator, None);
            let mut eval = file.eval.clone();
            a.eval.apply(&mut eval);
            let variants = a.variants.iter().map(|v| v.parse::<Variant>()).collect::<Result<Vec<_>>>()?;
            let sweeps = a.sweep.iter().map(|s| parse_sweep(s)).collect::<Result<Vec<_>>>()?;
            let suite = SuiteConfig {
                variants,
                seeds: a.seeds.clone(),
                sweeps,
                stage1,
                generator,
                eval,
            };
            let ds = load_dataset(&or_default(&a.data, "dataset"))?;
            let out = or_default(&a.out, "ablation");
            let report = run_ablation_suite(&ds, &suite)?;
            write_suite(&report, &out)?;
            let mut m = manifest("ablate", serde_json::to_value(&suite)?);
            m.dataset_hash = Some(ds.content_hash()?);
            m.finish(&out)?;
            if let Some(r) = &report.ablation {
                println!("{}", r.to_markdown());
            }
            println!("suite finished in {:.1} s", report.elapsed_s);
        }
        Command::Bench(a) => {
            let ds = load_dataset(&or_default(&a.data, "dataset"))?;
            let ckpt = or_default(&a.checkpoint, "generator");
            let out = a.out.clone().unwrap_or_else(|| ckpt.join("bench"));
            let model = Generator::load(&ckpt)?;
            let ids = IdBundle::load(&ckpt.join(IDS_SUBDIR))?;
            let sim = ids.similarity(model.cfg.k)?;
            let dec = Decoding::new(&ids.codes.table, &sim, false);
            let histories: Vec<&[u32]> = ds
                .sequences
                .iter()
                .map(|s| s.history_for(Split::Test))
                .filter(|h| !h.is_empty())
                .take(a.samples)
                .collect();
            let reports = benchmark_inference(&model, &dec, &histories, &a.beams, a.top_k, a.repeats)?;
            write_json(&out.join("timing.json"), &reports)?;
            let mut m = manifest("bench", json!({ "checkpoint": ckpt, "beams": a.beams, "top_k": a.top_k, "samples": a.samples }));
            m.dataset_hash = Some(ds.content_hash()?);
            m.finish(&out)?;
            for r in &reports {
                println!("beam {:>4}: {:.5} s/sample (std {:.5})", r.beam_size, r.mean_latency_s, r.std);
            }
        }
        Command::Plot(a) => {
            let value: serde_json::Value = read_json(&a.input)?;
            let out = a.out.clone().unwrap_or_else(|| a.input.parent().unwrap_or(Path::new(".")).join("reports"));
            let written = plot_any(value, &out)?;
            manifest("plot", json!({ "input": a.input })).finish(&out)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn parse_sweep(s: &str) -> Result<Sweep> {
    let (p, vals) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep '{s}' is not of the form PARAM=v1,v2")))?;
    let values = vals
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| Error::Config(format!("sweep value '{v}': {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sweep {
        param: p.parse::<SweepParam>()?,
        values,
    })
}

/// Collision report cross-checked against a sort-based duplicate scan.
fn audit(table: &SemanticIdTable) -> serde_json::Value {
    let report = table.collision_report();
    let mut rows: Vec<&[u32]> = (0..table.n_items()).map(|i| table.item(i)).collect();
    rows.sort_unstable();
    let mut duplicates = 0;
    let mut i = 0;
    while i < rows.len() {
        let j = (i..rows.len()).find(|&j| rows[j] != rows[i]).unwrap_or(rows.len());
        if j - i > 1 {
            duplicates += j - i;
        }
        i = j;
    }
    json!({
        "n_items": report.n_items,
        "levels": table.levels,
        "colliding_items_by_prefix": report.colliding_items,
        "full_collisions": report.full(),
        "full_collision_rate": report.full_rate(),
        "duplicate_scan": duplicates,
        "consistent": duplicates == report.full(),
    })
}

const PLOT_METRICS: [&str; 2] = ["R@10", "N@10"];

fn write_suite(report: &SuiteReport, out: &Path) -> Result<()> {
    write_json(&out.join("report.json"), report)?;
    let summary = json!({
        "ablation": report.ablation.as_ref().map(MetricReport::summary_json),
        "sweeps": report.sweeps.iter().map(|s| json!({
            "param": s.param.name(),
            "points": s.points.iter().map(|p| json!({ "value": p.value, "summary": p.report.summary })).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    });
    write_json(&out.join("metrics.json"), &summary)?;
    let mut md = String::new();
    if let Some(r) = &report.ablation {
        md.push_str(&r.to_markdown());
    }
    for s in &report.sweeps {
        md.push_str(&format!("\n### Sweep over {}\n\n| {} | R@10 | N@10 |\n|---:|---:|---:|\n", s.param.name(), s.param.name()));
        for p in &s.points {
            let m = &p.report.summary[0].mean;
            md.push_str(&format!("| {} | {:.4} | {:.4} |\n", p.value, m.get("R@10").unwrap_or(&f64::NAN), m.get("N@10").unwrap_or(&f64::NAN)));
        }
    }
    write_text(&out.join("report.md"), &md)?;
    plot_suite(report, &out.join("reports"))?;
    Ok(())
}

fn plot_suite(report: &SuiteReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if let Some(r) = &report.ablation {
        let p = dir.join("variants.svg");
        plot_variant_bars(r, &PLOT_METRICS, &p)?;
        written.push(p);
    }
    for s in &report.sweeps {
        let p = dir.join(format!("sweep_{}.svg", s.param.name()));
        plot_sweep(s, &PLOT_METRICS, &p)?;
        written.push(p);
    }
    Ok(written)
}

fn curve(points: impl Iterator<Item = (usize, f64)>) -> Vec<(f64, f64)> {
    points.map(|(x, y)| (x as f64, y)).collect()
}

fn plot_any(value: serde_json::Value, dir: &Path) -> Result<Vec<PathBuf>> {
    if let Ok(r) = serde_json::from_value::<SuiteReport>(value.clone()) {
        return plot_suite(&r, dir);
    }
    if let Ok(r) = serde_json::from_value::<TrainReport>(value.clone()) {
        let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        series.insert("total", curve(r.epochs.iter().map(|e| (e.epoch, e.total))));
        series.insert("rq", curve(r.epochs.iter().map(|e| (e.epoch, e.rq))));
        series.insert("recon", curve(r.epochs.iter().map(|e| (e.epoch, e.recon))));
        series.insert("rec", curve(r.epochs.iter().map(|e| (e.epoch, e.rec))));
        series.insert("mim", curve(r.epochs.iter().map(|e| (e.epoch, e.mim))));
        let p = dir.join("stage1_losses.svg");
        let s: Vec<(String, Vec<(f64, f64)>)> = series.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        plot_lines("Tokenizer training", "epoch", &s, &p)?;
        return Ok(vec![p]);
    }
    if let Ok(r) = serde_json::from_value::<GenTrainReport>(value) {
        let s = vec![
            ("train".to_string(), curve(r.epochs.iter().map(|e| (e.epoch, e.train_loss)))),
            ("valid".to_string(), curve(r.epochs.iter().map(|e| (e.epoch, e.valid_loss)))),
        ];
        let p = dir.join("generator_losses.svg");
        plot_lines("Generator training", "epoch", &s, &p)?;
        return Ok(vec![p]);
    }
    Err(Error::Precondition("input is not an ablation, tokenizer or generator report".into()))
}
