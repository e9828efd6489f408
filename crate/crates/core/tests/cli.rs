use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nightprompt::data::synth::derive_seed;
use nightprompt::data::Frame;
use nightprompt::model::{BackboneConfig, Tracker};
use nightprompt::pipeline::checkpoint::{foundation_bytes, load_checkpoint};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nightprompt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, seed: &str, night: bool) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["gen-data", "--out", s(&out), "--seqs", "2", "--frames", "10", "--seed", seed];
    if night {
        args.push("--night");
    }
    ok(&args);
    out
}

/// Every file under `root`, relative path to bytes.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn mean_pixel(root: &Path) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (rel, _) in tree(root) {
        if rel.extension().is_some_and(|e| e == "ppm") {
            let f = Frame::read_ppm(&root.join(rel)).unwrap();
            sum += f.to_image().mean();
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn gen_data_is_deterministic_and_night_is_darker() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", "7", false);
    let b = gen(dir.path(), "b", "7", false);
    assert_eq!(tree(&a), tree(&b));
    let night = gen(dir.path(), "n", "7", true);
    assert!(mean_pixel(&night) < mean_pixel(&a));
    assert!(dir.path().join("a.run.json").exists());
}

#[test]
fn gen_data_usage_and_refusal() {
    assert_eq!(run(&["gen-data", "--seqs", "2"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", "1", false);
    let again = run(&["gen-data", "--out", s(&a), "--seqs", "2", "--frames", "10", "--seed", "2"]);
    assert_eq!(again.status.code(), Some(1));
    let forced = ok(&["gen-data", "--out", s(&a), "--seqs", "1", "--frames", "5", "--seed", "2", "--force"]);
    assert!(forced.status.success());
    assert!(a.join("seq000").exists() && !a.join("seq001").exists());
}

#[test]
fn zero_epoch_training_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "day", "3", false);
    let ckpt = dir.path().join("base.ckpt");
    ok(&["train-base", "--data", s(&data), "--out", s(&ckpt), "--preset", "tiny", "--epochs", "0", "--seed", "11"]);
    let loaded = load_checkpoint(&ckpt).unwrap().tracker;
    let init = Tracker::foundation(BackboneConfig::tiny(), derive_seed(11, 0)).unwrap();
    for (a, b) in loaded.params.iter().zip(init.params.iter()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "day", "3", false);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"preset": "tiny", "epochs": 2, "pairs_per_epoch": 4, "batch_size": 2, "lr": 0.5}"#).unwrap();
    let ckpt = dir.path().join("base.ckpt");
    ok(&["--config", s(&cfg), "train-base", "--data", s(&data), "--out", s(&ckpt), "--lr", "0.001"]);
    let tc = load_checkpoint(&ckpt).unwrap().train_config.unwrap();
    assert_eq!((tc.epochs, tc.pairs_per_epoch, tc.batch_size, tc.lr), (2, 4, 2, 0.001));
    let log = fs::read_to_string(dir.path().join("base.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,mean_loss,lr"));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"learning_rate": 1}"#).unwrap();
    let out = run(&["--config", s(&bad), "train-base", "--data", s(&data), "--out", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tune_track_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "night", "5", true);
    let base = dir.path().join("base.ckpt");
    ok(&["train-base", "--data", s(&data), "--out", s(&base), "--preset", "tiny", "--epochs", "1", "--pairs-per-epoch", "8", "--batch-size", "4"]);

    let rejected = run(&["prompt-tune", "--data", s(&data), "--base", s(&base), "--out", s(&dir.path().join("x.ckpt")), "--profile", "base"]);
    assert_eq!(rejected.status.code(), Some(2));
    assert!(!dir.path().join("x.ckpt").exists());

    let tuned = dir.path().join("full.ckpt");
    ok(&[
        "prompt-tune", "--data", s(&data), "--base", s(&base), "--out", s(&tuned), "--profile", "dcp+gfa_full",
        "--epochs", "2", "--pairs-per-epoch", "8", "--batch-size", "4", "--decay-epoch", "1",
    ]);
    assert_eq!(foundation_bytes(&base).unwrap(), foundation_bytes(&tuned).unwrap());
    let log = fs::read_to_string(dir.path().join("full.ckpt.log.csv")).unwrap();
    let lrs: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(lrs.len(), 2);
    assert!(lrs[1] < lrs[0]);

    let p1 = dir.path().join("p1");
    let p3 = dir.path().join("p3");
    ok(&["track", "--data", s(&data), "--ckpt", s(&tuned), "--out", s(&p1), "--workers", "1"]);
    ok(&["track", "--data", s(&data), "--ckpt", s(&tuned), "--out", s(&p3), "--workers", "3"]);
    assert_eq!(tree(&p1), tree(&p3));
    assert!(dir.path().join("p1.run.json").exists());

    let report = dir.path().join("r.json");
    ok(&["eval", "--data", s(&data), "--pred", s(&p1), "--report", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["overall"]["success_curve"].as_array().unwrap().len(), 21);
    assert_eq!(v["overall"]["precision_curve"].as_array().unwrap().len(), 51);
    assert_eq!(v["overall"]["norm_precision_curve"].as_array().unwrap().len(), 51);

    // scoring the checkpoint directly gives the same metrics; only the
    // degenerate-frame counts, which a boxes file cannot carry, may differ
    let direct = dir.path().join("d.json");
    ok(&["eval", "--data", s(&data), "--ckpt", s(&tuned), "--report", s(&direct), "--workers", "2"]);
    let d: serde_json::Value = serde_json::from_str(&fs::read_to_string(&direct).unwrap()).unwrap();
    assert_eq!(v["overall"], d["overall"]);
    assert_eq!(v["attributes"], d["attributes"]);
}

#[test]
fn groundtruth_as_prediction_and_length_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "day", "9", false);
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for seq in ["seq000", "seq001"] {
        fs::copy(data.join(seq).join("groundtruth.txt"), pred.join(format!("{seq}.txt"))).unwrap();
    }
    let report = dir.path().join("gt.json");
    ok(&["eval", "--data", s(&data), "--pred", s(&pred), "--report", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    // 20 thresholds pass, 1.0 does not; summing the rates may cost an ulp
    assert!((v["overall"]["success_score"].as_f64().unwrap() - 20.0 / 21.0).abs() < 1e-15);
    assert_eq!(v["overall"]["precision_score"].as_f64().unwrap(), 1.0);

    let text = fs::read_to_string(pred.join("seq001.txt")).unwrap();
    let short: String = text.lines().take(7).map(|l| format!("{l}\n")).collect();
    fs::write(pred.join("seq001.txt"), short).unwrap();
    let out = run(&["eval", "--data", s(&data), "--pred", s(&pred), "--report", s(&report)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seq001"));
}

#[test]
fn ablate_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "night", "4", true);
    let base = dir.path().join("base.ckpt");
    ok(&["train-base", "--data", s(&data), "--out", s(&base), "--preset", "tiny", "--epochs", "1", "--pairs-per-epoch", "4", "--batch-size", "4"]);
    let out = dir.path().join("abl");
    ok(&[
        "ablate", "--train-data", s(&data), "--eval-data", s(&data), "--base", s(&base), "--out", s(&out),
        "--epochs", "1", "--pairs-per-epoch", "4", "--batch-size", "4",
    ]);
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["Base", "Base+DCP", "Base+DCP+GFA_pp", "Base+DCP+GFA_pp,pb"]);
    assert_eq!(rows[0]["trainable_fraction"].as_f64().unwrap(), 0.0);
    assert!(rows[1..].iter().all(|r| r["trainable_fraction"].as_f64().unwrap() > 0.0));
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 5);
}

#[test]
fn gradcheck_passes_on_tiny_model() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for class in ["dcp.conv", "dcp.offset", "dcp.alpha", "dcp.beta", "gfa.chain_gate", "gfa.token_gates"] {
        assert!(text.contains(class), "{class} missing from\n{text}");
    }
    assert!(text.contains("gradcheck passed"));
}
