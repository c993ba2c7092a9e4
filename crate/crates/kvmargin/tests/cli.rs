use std::path::Path;
use std::process::{Command, Output};

fn kvmargin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvmargin"))
        .args(args)
        .env_remove("KV_MARGIN_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stdout));
    })
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth-dump", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = kvmargin(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validate_reports_each_path() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    synth(&good, &["--preset", "toy-1d", "--per-class", "4"]);
    let out = kvmargin(&["validate", good.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["all_valid"], true);
    assert_eq!(v["results"][0]["sample_count"], 8);

    let out = kvmargin(&["validate", good.to_str().unwrap(), tmp.path().join("nope").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let v = json(&out);
    assert_eq!(v["all_valid"], false);
    assert_eq!(v["results"][1]["error_kind"], "IoError");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&kvmargin(&[])), 2);
    assert_eq!(code(&kvmargin(&["measure"])), 2);
    assert_eq!(code(&kvmargin(&["measure", "x", "--kinds", "bogus"])), 2);
    assert_eq!(code(&kvmargin(&["measure", "x", "--statistic", "quantile:2"])), 2);
    assert_eq!(code(&kvmargin(&["measure", "x", "--json", "--csv"])), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_kvmargin"))
        .args(["validate", "x"])
        .env("KV_MARGIN_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn measure_is_deterministic_and_thread_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("g");
    synth(&dir, &["--preset", "two-gaussians", "--per-class", "60", "--seed", "3"]);
    let args = ["measure", dir.to_str().unwrap(), "--seed", "11", "--repeats", "3"];
    let first = kvmargin(&args);
    assert_eq!(code(&first), 0);
    assert_eq!(first.stdout, kvmargin(&args).stdout);
    let single = Command::new(env!("CARGO_BIN_EXE_kvmargin"))
        .args(args)
        .env("KV_MARGIN_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(first.stdout, single.stdout);

    let other = kvmargin(&["measure", dir.to_str().unwrap(), "--seed", "12", "--repeats", "3"]);
    assert_ne!(first.stdout, other.stdout);

    let v = json(&first);
    let kinds: Vec<&str> = v["reports"][0]["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["kind"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, ["raw", "gn", "kv", "kv_gn", "tv_gn"]);
}

#[test]
fn measure_csv_has_one_row_per_result() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("p");
    synth(&dir, &["--preset", "two-point"]);
    let out = kvmargin(&["measure", dir.to_str().unwrap(), "--kinds", "kv,raw", "--csv"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "path,model_id,kind,layer,statistic,value,samples,seed");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",kv,phi,median,1.0000000000000000e0,"), "{}", lines[1]);
}

#[test]
fn measure_missing_layer_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("p");
    synth(&dir, &["--preset", "two-point"]);
    let out = kvmargin(&["measure", dir.to_str().unwrap(), "--layers", "nope", "--kinds", "kv"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("SchemaError"));
}

fn collection(root: &Path, constant: bool) {
    for i in 0..8usize {
        let dir = root.join(format!("m{i}"));
        let sep = if constant { 3.0 } else { 1.0 + 0.5 * i as f64 };
        let gap = format!("{}", 0.05 * (8 - i) as f64);
        let a = format!("a={}", i & 1);
        let b = format!("b={}", (i >> 1) & 1);
        synth(&dir, &[
            "--preset", "two-gaussians", "--per-class", "30", "--seed", "5",
            "--separation", &sep.to_string(), "--gen-gap", &gap,
            "--model-id", &format!("model-{i}"), "--hyperparam", &a, "--hyperparam", &b,
        ]);
    }
}

#[test]
fn rank_with_oracle_gap_scores_100() {
    let tmp = tempfile::tempdir().unwrap();
    collection(tmp.path(), false);
    let out = kvmargin(&["rank", tmp.path().to_str().unwrap(), "--measure-kind", "oracle-gap"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["cmi"]["score"].as_f64().unwrap(), 100.0);
    assert_eq!(v["models"].as_array().unwrap().len(), 8);
    assert_eq!(v["kendall_tau"].as_f64().unwrap(), 1.0);
}

#[test]
fn rank_margin_measure_runs() {
    let tmp = tempfile::tempdir().unwrap();
    collection(tmp.path(), false);
    let args = ["rank", tmp.path().to_str().unwrap(), "--measure-kind", "raw"];
    let out = kvmargin(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(out.stdout, kvmargin(&args).stdout);
    let score = json(&out)["cmi"]["score"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&score));
}

#[test]
fn rank_constant_measure_is_insufficient() {
    let tmp = tempfile::tempdir().unwrap();
    collection(tmp.path(), true);
    let out = kvmargin(&["rank", tmp.path().to_str().unwrap(), "--measure-kind", "raw"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("InsufficientData"));
}

#[test]
fn rank_mixup_needs_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    collection(tmp.path(), false);
    let out = kvmargin(&["rank", tmp.path().to_str().unwrap(), "--mixup"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mixup_accuracy"));
}

#[test]
fn synth_separation_check_passes() {
    let out = kvmargin(&["synth", "--check", "separation", "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(json(&out)["passed"], true);
}
