//! Drives the `gearqat` binary through a short pipeline.

use std::path::Path;
use std::process::{Command, Output};

use gearqat::manifest::{FileRecord, RunManifest};

fn gearqat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gearqat"))
        .args(args)
        .env_remove("GEARQAT_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gearqat(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn digest(p: &Path) -> String {
    FileRecord::of_file(p).unwrap().sha256
}

#[test]
fn pipeline_chains_manifests_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let fp32 = dir.path().join("fp32.json");
    let q8 = dir.path().join("q8.json");
    let report = dir.path().join("eval.json");

    ok(&["gen-data", "--out", s(&data), "--train-per-class", "6", "--val-per-class", "3", "--test-per-class", "3",
        "--unseen-per-class", "2", "--window-len", "64", "--seed", "4"]);
    ok(&["train", "--data", s(&data), "--out", s(&fp32), "--epochs", "2", "--seed", "4"]);
    ok(&["qat", "--in", s(&fp32), "--data", s(&data), "--bits", "8", "--out", s(&q8), "--epochs", "1"]);
    ok(&["eval", "--model", s(&q8), "--data", s(&data), "--mc", "4", "--out", s(&report)]);

    let manifests = [
        data.join("gen-data.manifest.json"),
        dir.path().join("fp32.json.manifest.json"),
        dir.path().join("q8.json.manifest.json"),
        dir.path().join("eval.json.manifest.json"),
    ];
    let loaded: Vec<RunManifest> = manifests.iter().map(|m| RunManifest::load(m).unwrap()).collect();
    let commands: Vec<&str> = loaded.iter().map(|m| m.command.as_str()).collect();
    assert_eq!(commands, ["gen-data", "train", "qat", "eval"]);
    // Each step's output digest reappears as the next step's input digest.
    for pair in loaded.windows(2) {
        let produced: Vec<&str> = pair[0].outputs.iter().map(|r| r.sha256.as_str()).collect();
        assert!(pair[1].inputs.iter().any(|r| produced.contains(&r.sha256.as_str())), "{} -> {}", pair[0].command, pair[1].command);
    }
    assert_eq!(loaded[2].outputs[0].sha256, digest(&q8));

    let before = digest(&report);
    ok(&["--verify", "eval", "--model", s(&q8), "--data", s(&data), "--mc", "4", "--out", s(&report)]);
    assert_eq!(digest(&report), before);

    let mut bytes = std::fs::read(&q8).unwrap();
    let last = bytes.len() - 2;
    bytes[last] = if bytes[last] == b' ' { b'\n' } else { b' ' };
    std::fs::write(&q8, bytes).unwrap();
    let out = gearqat(&["--verify", "eval", "--model", s(&q8), "--data", s(&data), "--mc", "4", "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(digest(&report), before);
}

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = gearqat(&["gen-data", "--out", s(&data), "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!data.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unsupported_bits_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = gearqat(&["ptq", "--in", s(&dir.path().join("missing.json")), "--bits", "1", "--out", s(&dir.path().join("q.json"))]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn select_reports_choice_or_closest() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("sweep.csv");
    std::fs::write(
        &sweep,
        "b,accuracy,ece,cost,memory_payload_bytes,memory_total_bytes,epsilon,seed\n\
         4,0.90,0.05,16,100,200,0.1,1\n\
         8,0.97,0.02,64,200,300,0.01,1\n\
         32,0.98,0.01,1024,800,900,0.0,1\n",
    )
    .unwrap();
    let choice = dir.path().join("choice.json");
    let out = ok(&["select", "--sweep", s(&sweep), "--a-min", "0.95", "--u-max", "0.03", "--out", s(&choice)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("b=8"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&choice).unwrap()).unwrap();
    assert_eq!(v["outcome"], "selected");
    assert_eq!(v["bits"], 8);

    let out = ok(&["select", "--sweep", s(&sweep), "--a-min", "0.99", "--u-max", "0.001"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("infeasible"));

    let out = gearqat(&["select", "--sweep", s(&dir.path().join("none.csv")), "--a-min", "0.9", "--u-max", "0.1"]);
    assert_eq!(out.status.code(), Some(5));
}
