use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[synth]
n_items = 80
n_users = 120
n_clusters = 6

[stage1]
codes = 8
dim = 8
seq_dim = 16
max_epochs = 2
batch_size = 32
valid_users = 32

[generator]
model_dim = 24
heads = 2
encoder_layers = 1
decoder_layers = 1
ff_dim = 48
max_len = 5
k = 10
sim_layers = 1
max_epochs = 2
batch_size = 32
valid_users = 32

[eval]
ks = [5, 10]
beam_size = 10
"#;

fn semrec(root: &Path, args: &[&str]) -> Output {
    let cfg = root.join("tiny.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_semrec"))
        .args(["--workers", "1", "--config"])
        .arg(&cfg)
        .args(args)
        .env("SEMREC_DATA_ROOT", root)
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = semrec(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["synth"]);
    assert!(root.join("dataset/manifest.json").exists());

    ok(root, &["train-quant", "--seed", "3"]);
    let report = json(&root.join("stage1/train_report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);

    ok(root, &["assign-ids"]);
    let tsv = std::fs::read_to_string(root.join("ids/semantic_ids.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 80);

    let audit: serde_json::Value = serde_json::from_str(&ok(root, &["collisions"])).unwrap();
    assert_eq!(audit["consistent"], true);

    ok(root, &["train-gen"]);
    assert!(root.join("generator/ids/semantic_ids.tsv").exists());

    ok(root, &["evaluate", "--k", "1,5"]);
    let metrics = json(&root.join("generator/eval/metrics.json"));
    let text = metrics.to_string();
    assert!(text.contains("R@1") && text.contains("N@5"), "{text}");
    let rankings = std::fs::read_to_string(root.join("generator/eval/rankings.jsonl")).unwrap();
    assert!(rankings.lines().count() > 0);

    ok(root, &["bench", "--beams", "5,10", "--top-k", "5", "--samples", "4", "--repeats", "1"]);
    let timing = json(&root.join("generator/bench/timing.json"));
    assert_eq!(timing.as_array().unwrap().len(), 2);

    let printed = ok(root, &["plot", "--input", root.join("generator/train_report.json").to_str().unwrap()]);
    assert!(printed.trim().ends_with(".svg"));
}

#[test]
fn ablation_writes_report_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["synth"]);
    let out = ok(root, &["ablate", "--variants", "full,s", "--seeds", "1,2", "--sweep", "L=1,2"]);
    assert!(out.contains("| full |"));
    let report = json(&root.join("ablation/report.json"));
    assert_eq!(report["ablation"]["runs"].as_array().unwrap().len(), 4);
    assert_eq!(report["sweeps"][0]["points"].as_array().unwrap().len(), 2);
    assert!(root.join("ablation/report.md").exists());
    assert!(root.join("ablation/reports/variants.svg").exists());
    assert!(root.join("ablation/reports/sweep_L.svg").exists());
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(semrec(root, &["synth", "--items", "many"]).status.code(), Some(2));
    assert_eq!(semrec(root, &["--workers", "0", "synth"]).status.code(), Some(2));
    // no dataset yet
    let out = semrec(root, &["train-quant"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    // unknown key in a config file
    let bad = root.join("bad.toml");
    std::fs::write(&bad, "[stage1]\nlevelz = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_semrec"))
        .args(["--config", bad.to_str().unwrap(), "synth"])
        .env("SEMREC_DATA_ROOT", root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    ok(root, &["synth"]);
    let out = semrec(root, &["ablate", "--variants", "full,bogus"]);
    assert_eq!(out.status.code(), Some(1));
}
