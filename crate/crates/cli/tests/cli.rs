//! End-to-end runs of the `pine` binary.

use std::path::Path;
use std::process::{Command, Output};

fn pine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pine"))
        .args(args)
        .env("PINE_NUM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn write_prompt(dir: &Path, name: &str, documents: &[&str]) -> String {
    let path = dir.join(name);
    let prompt = serde_json::json!({
        "prefix": "Context:\n",
        "documents": documents,
        "suffix": "\nA: ",
    });
    std::fs::write(&path, prompt.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(pine(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(pine(&["frobnicate"]).status.code(), Some(1));
    let prompt = fixture("retrieval.json");
    let out = pine(&["run", "--prompt", &prompt, "--mode", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_pine"))
        .args(["run", "--prompt", &prompt])
        .env("PINE_NUM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = pine(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("invariance"));
}

#[test]
fn missing_and_malformed_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let out = pine(&["run", "--prompt", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"documents": ["A", ""]}"#).unwrap();
    assert_eq!(pine(&["run", "--prompt", bad.to_str().unwrap()]).status.code(), Some(2));

    let model = dir.path().join("junk.safetensors");
    std::fs::write(&model, b"not a container").unwrap();
    let out = pine(&[
        "run",
        "--model",
        model.to_str().unwrap(),
        "--config",
        &fixture("tiny_long.toml"),
        "--prompt",
        &fixture("retrieval.json"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn saved_model_reproduces_seeded_run() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.safetensors");
    let config = dir.path().join("m.toml");
    let init = pine(&[
        "init",
        "--seed",
        "11",
        "--out-model",
        model.to_str().unwrap(),
        "--out-config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(init.status.code(), Some(0));
    let prompt = write_prompt(dir.path(), "p.json", &["ok", "red", "apple"]);
    let common = ["--prompt", prompt.as_str(), "--mode", "pine", "--max-new-tokens", "6"];
    let seeded = pine(&[&["run", "--seed", "11"][..], &common].concat());
    let loaded = pine(
        &[
            &["run", "--model", model.to_str().unwrap(), "--config", config.to_str().unwrap()][..],
            &common,
        ]
        .concat(),
    );
    assert_eq!(seeded.status.code(), Some(0));
    assert_eq!(stdout(&seeded), stdout(&loaded));
}

#[test]
fn pine_text_ignores_document_order_in_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_prompt(dir.path(), "a.json", &["ok", "red", "apple"]);
    let b = write_prompt(dir.path(), "b.json", &["apple", "ok", "red"]);
    let run = |p: &str| stdout(&pine(&["run", "--prompt", p, "--mode", "pine", "--max-new-tokens", "12"]));
    assert_eq!(run(&a), run(&b));
}

#[test]
fn run_writes_report_importance_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let prompt = write_prompt(dir.path(), "p.json", &["AB", "CD", "EF"]);
    let report = dir.path().join("r.json");
    let importance = dir.path().join("imp.tsv");
    let mask = dir.path().join("mask.txt");
    let out = pine(&[
        "run",
        "--prompt",
        &prompt,
        "--mode",
        "pine",
        "--max-new-tokens",
        "3",
        "--report-out",
        report.to_str().unwrap(),
        "--importance-out",
        importance.to_str().unwrap(),
        "--mask-out",
        mask.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report["command"], "run");
    assert!(report["config_hash"].as_str().unwrap().len() == 64);
    let tsv = std::fs::read_to_string(importance).unwrap();
    assert!(tsv.starts_with("layer\thead\tgroup\tdoc\tscore\tblock"));
    let mask = std::fs::read_to_string(mask).unwrap();
    // BOS + 9 prefix bytes + 6 document bytes + 4 suffix bytes
    assert_eq!(mask.lines().count(), 20);
}

#[test]
fn invariance_suite_passes_and_fails_as_expected() {
    let prompt = fixture("retrieval.json");
    let config = fixture("tiny_long.toml");
    let base = ["invariance", "--config", config.as_str(), "--prompt", prompt.as_str(), "--max-new-tokens", "2"];
    let ok = pine(&[&base[..], &["--mode", "pine,pcw,sp,vanilla"]].concat());
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert_eq!(stdout(&ok).lines().filter(|l| l.starts_with("ok\t")).count(), 4);

    let dir = tempfile::tempdir().unwrap();
    let one = write_prompt(dir.path(), "one.json", &["only"]);
    let out = pine(&["invariance", "--prompt", &one, "--mode", "pine"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn identical_documents_leave_vanilla_without_a_witness() {
    let dir = tempfile::tempdir().unwrap();
    let prompt = write_prompt(dir.path(), "same.json", &["xyz", "xyz", "xyz"]);
    let out = pine(&["invariance", "--prompt", &prompt, "--mode", "vanilla", "--max-new-tokens", "2"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stdout(&out).contains("no witness"));
}

#[test]
fn bias_scan_fixture_is_flat_for_pine() {
    let out = pine(&["bias-scan", "--scan", &fixture("bias_scan.json"), "--mode", "pine"]);
    assert_eq!(out.status.code(), Some(0));
    let values: Vec<String> = stdout(&out)
        .lines()
        .skip(1)
        .map(|l| l.rsplit('\t').next().unwrap().to_string())
        .collect();
    assert_eq!(values.len(), 5);
    assert!(values.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn bench_rejects_too_few_repeats() {
    let prompt = fixture("retrieval.json");
    let config = fixture("tiny_long.toml");
    let out = pine(&["bench", "--config", &config, "--prompt", &prompt, "--repeats", "2"]);
    assert_eq!(out.status.code(), Some(1));
}
