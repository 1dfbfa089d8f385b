use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grpo-rank"))
}

fn stub() -> &'static str {
    env!("CARGO_BIN_EXE_grpo-rank-oracle-stub")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A tiny run: one epoch of eight steps on the smoke task.
fn small_config(dir: &Path, algorithm: &str) -> PathBuf {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke_50.json")).unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    cfg["training"]["steps_per_epoch"] = 8.into();
    cfg["training"]["algorithm"] = algorithm.into();
    if algorithm == "ppo" {
        cfg["training"].as_object_mut().unwrap().remove("group_size");
    }
    cfg["output"]["eval_samples"] = 20.into();
    let path = dir.join(format!("{algorithm}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn misspelled_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"training": {"epohcs": 3}}"#).unwrap();
    let out = run(bin().args(["train", "--config"]).arg(&path).arg("--out").arg(dir.path().join("run")));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("training.epohcs"), "{}", stderr(&out));
}

#[test]
fn out_of_range_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"training": {"eps": -0.5}}"#).unwrap();
    let out = run(bin().args(["train", "--config"]).arg(&path).arg("--out").arg(dir.path().join("run")));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("training.eps"), "{}", stderr(&out));
}

#[test]
fn table_prints_two_response_example() {
    let out = run(bin().args(["table", "--k", "2"]));
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("-0.1038") || text.contains("-0.1037"), "{text}");
    assert!(text.contains("+0.1038") || text.contains("+0.1037"), "{text}");
}

#[test]
fn table_as_written_mode_uses_the_division_form() {
    let out = run(bin().args(["table", "--mode", "as-written"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8(out.stdout).unwrap().contains("0.3155"));
}

#[test]
fn table_rejects_bad_arguments() {
    let out = run(bin().args(["table", "--k", "3", "--truth", "7"]));
    assert_eq!(code(&out), 1);
    let out = run(bin().args(["table", "--k", "1"]));
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_reports_json_and_enforces_caps() {
    let out = run(bin().args(["gradcheck", "--instances", "12", "--json"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report.is_object());
    let out = run(bin().args(["gradcheck", "--max-vocab", "9"]));
    assert_eq!(code(&out), 1);
}

#[test]
fn train_then_eval_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "grpo_rank");
    let run_dir = dir.path().join("run");
    let out = run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run_dir));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["resolved_config.json", "metrics.jsonl", "policy.ckpt", "eval_report.json", "summary.csv"] {
        assert!(run_dir.join(name).exists(), "missing {name}");
    }
    let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[0]["record"], "header");
    assert!(lines[1..].iter().all(|l| l["record"] == "step"));

    let eval_dir = dir.path().join("eval");
    let out = run(bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(run_dir.join("policy.ckpt"))
        .arg("--out")
        .arg(&eval_dir));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("eval_report.json")).unwrap()).unwrap();
    assert!(report["sampled_mean_score"].as_f64().unwrap() <= 0.0);
}

#[test]
fn eval_rejects_damaged_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "grpo_rank");
    let ckpt = dir.path().join("junk.ckpt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = run(bin().args(["eval", "--config"]).arg(&cfg).arg("--checkpoint").arg(&ckpt));
    assert_ne!(code(&out), 0);
}

#[test]
fn parallel_and_single_thread_metrics_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "grpo_rank");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&a))), 0);
    assert_eq!(
        code(&run(bin().args(["train", "--single-thread", "--config"]).arg(&cfg).arg("--out").arg(&b))),
        0
    );
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("policy.ckpt")).unwrap(), fs::read(b.join("policy.ckpt")).unwrap());
}

#[test]
fn compare_writes_curves_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let rank = small_config(dir.path(), "grpo_rank");
    let ppo = small_config(dir.path(), "ppo");
    let out_dir = dir.path().join("cmp");
    let out = run(bin()
        .args(["compare", "--seeds", "1,2", "--config"])
        .arg(&rank)
        .arg("--config")
        .arg(&ppo)
        .arg("--out")
        .arg(&out_dir));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(out_dir.join("compare.csv")).unwrap();
    assert_eq!(reader.records().count(), 2 * 8);
    let runs: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("compare_runs.json")).unwrap()).unwrap();
    assert_eq!(runs.as_array().unwrap().len(), 4);
}

#[test]
fn external_oracle_matches_the_in_process_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "grpo_rank");
    let inner = dir.path().join("inner");
    let outer = dir.path().join("outer");
    assert_eq!(code(&run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&inner))), 0);
    let argv = format!("{} --config {}", stub(), cfg.display());
    let out = run(bin().args(["train", "--oracle-cmd", &argv, "--config"]).arg(&cfg).arg("--out").arg(&outer));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(inner.join("policy.ckpt")).unwrap(), fs::read(outer.join("policy.ckpt")).unwrap());
}

#[test]
fn missing_oracle_program_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "grpo_rank");
    let out = run(bin()
        .args(["train", "--oracle-cmd", "/nonexistent/judge", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run")));
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[cfg(unix)]
#[test]
fn oracle_that_exits_mid_run_aborts_with_runtime_error() {
    use std::os::unix::fs::PermissionsExt;
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "grpo_rank");
    let script = dir.path().join("judge.sh");
    fs::write(&script, "#!/bin/sh\nread line\nexit 0\n").unwrap();
    fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
    let out = run(bin()
        .args(["train", "--oracle-cmd"])
        .arg(&script)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run")));
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}
