use std::path::Path;
use std::process::{Command, Output};

use mixres::harness::manifest::RunConfig;
use mixres::harness::netpbm::{read_pgm, read_ppm};
use mixres::serialize::decode_features;
use serde_json::Value;

fn mixres(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixres")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_record(out: &Output) -> Value {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.lines().last().unwrap()).unwrap()
}

/// A tiny run: few scenes, few steps.
fn write_config(dir: &Path) -> String {
    let mut run = RunConfig::desk();
    run.data.train_scenes = 6;
    run.data.heldout_scenes = 5;
    run.train.steps = 3;
    run.train.batch_size = 2;
    run.eval_batch_size = 4;
    let path = dir.join("run.json");
    std::fs::write(&path, run.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_readable_images_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("gen");
    let v = stdout_json(&mixres(&["gen", "--config", &cfg, "--seed", "4", "--count", "3", "--out", s(&out)]));
    assert_eq!(v["scenes"], 3);
    for i in 0..3 {
        let img = read_ppm(&out.join(format!("scene{i:05}.ppm"))).unwrap();
        let labels = read_pgm(&out.join(format!("scene{i:05}.pgm"))).unwrap();
        assert_eq!((img.height(), labels.height()), (64, 64));
    }
    let desc: Value = serde_json::from_str(&std::fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(desc["seed"], 4);
}

#[test]
fn train_then_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let trained = dir.path().join("trained");
    let v = stdout_json(&mixres(&["train", "--config", &cfg, "--seed", "1", "--tau", "0.3,0.4,0.5", "--out", s(&trained)]));
    assert_eq!(v["steps"], 3);
    let run = trained.join("run.json");
    let params = trained.join("params.bin");
    let log: Value = serde_json::from_str(&std::fs::read_to_string(trained.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log["steps"].as_array().unwrap().len(), 3);

    let evals: Vec<_> = (0..2).map(|i| dir.path().join(format!("eval{i}"))).collect();
    for e in &evals {
        let args = ["eval", "--config", s(&run), "--params", s(&params), "--seed", "1", "--overlays", "2", "--features", "2", "--out", s(e)];
        let v = stdout_json(&mixres(&args));
        assert_eq!(v["scenes"], 5);
    }
    let mut names: Vec<_> = std::fs::read_dir(&evals[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 1 + 2 * 4 + 2);
    for n in &names {
        assert_eq!(std::fs::read(evals[0].join(n)).unwrap(), std::fs::read(evals[1].join(n)).unwrap());
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(evals[0].join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["thresholds"], serde_json::json!([0.3, 0.4, 0.5]));
    let feats = decode_features(&std::fs::read(evals[0].join("scene0001.features")).unwrap()).unwrap();
    assert_eq!(feats.len(), 4);
    assert_eq!(feats[0].0.len(), 4);
}

#[test]
fn eval_with_params_from_another_config_fails_with_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let trained = dir.path().join("t");
    stdout_json(&mixres(&["train", "--config", &cfg, "--policy", "dense", "--out", s(&trained)]));
    let out = mixres(&["eval", "--config", &cfg, "--params", s(&trained.join("params.bin")), "--out", s(&dir.path().join("e"))]);
    let rec = error_record(&out);
    assert_eq!(rec["error"]["kind"], "format");
    assert_eq!(rec["error"]["command"], "eval");
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flops_table_has_constant_dense_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("f");
    let v = stdout_json(&mixres(&["flops", "--config", &cfg, "--out", s(&out)]));
    assert_eq!(v["policies"], 4);
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(out.join("flops.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["policy"]["kind"], "dense");
    assert_eq!(rows[0]["flops"]["std"], 0.0);
    assert_eq!(rows[0]["relative_to_dense"], 1.0);
    assert!(rows.as_array().unwrap().iter().all(|r| r["instrumented_matches_analytic"] == true));
    let rr = &rows[2]["flops"]["mean"];
    assert!(rr.as_f64().unwrap() < rows[0]["flops"]["mean"].as_f64().unwrap());
}

#[test]
fn ablate_writes_one_run_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("a");
    let v = stdout_json(&mixres(&["ablate", "stage1_only", "--config", &cfg, "--steps", "2", "--out", s(&out)]));
    assert_eq!(v["runs"].as_array().unwrap().len(), 1);
    assert!(out.join("stage1_only").join("manifest.json").exists());
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["label"], "stage1_only");
}

#[test]
fn bad_arguments_produce_usage_records() {
    for args in [
        vec!["eval", "--tau", "0.1,0.2"],
        vec!["eval", "--tau", "0.1,-1,0.2"],
        vec!["ablate", "no_such_variant"],
        vec!["launch"],
    ] {
        let out = mixres(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(error_record(&out)["error"]["kind"], "usage");
    }
}

#[test]
fn runtime_failures_produce_typed_records() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let rec = error_record(&mixres(&["train", "--config", s(&missing)]));
    assert_eq!(rec["error"]["kind"], "io");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"encoder\": 3}").unwrap();
    assert_eq!(error_record(&mixres(&["eval", "--config", s(&bad)]))["error"]["kind"], "config");

    let cfg = write_config(dir.path());
    let rec = error_record(&mixres(&["train", "--config", &cfg, "--policy", "greedy", "--out", s(&dir.path().join("x"))]));
    assert_eq!(rec["error"]["kind"], "config");
}

#[test]
fn help_exits_cleanly() {
    let out = mixres(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen", "train", "eval", "flops", "ablate"] {
        assert!(text.contains(sub));
    }
}
