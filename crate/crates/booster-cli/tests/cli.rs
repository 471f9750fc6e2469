//! End-to-end checks of the binaries: exit codes, CSV shapes, resume.

use std::path::Path;
use std::process::{Command, Output};

fn booster(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_booster")).args(args).output().unwrap()
}

fn verify_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_booster-verify"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("binary was killed by a signal")
}

fn write_plan(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

const TINY_PLAN: &str = r#"{
  "arch": "cnn-small",
  "seed": 9,
  "epochs": 1,
  "signal_width": 2,
  "signal_iters": 1,
  "subset_size": 64,
  "eval_batch": 25,
  "train_limit": 200,
  "test_limit": 50
}"#;

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = booster(&["--definitely-not-a-flag"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("Usage"), "usage text missing from: {err}");
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = booster(&[
        "eval",
        "--ckpt",
        dir.path().join("nope").to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    write_plan(&plan, TINY_PLAN);
    let out = booster(&[
        "train",
        "--plan",
        plan.to_str().unwrap(),
        "--data",
        dir.path().join("absent").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn malformed_plan_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    write_plan(&plan, r#"{"arch": "cnn-small", "epochs": "#);
    let out = booster(&[
        "train",
        "--plan",
        plan.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let plan = dir.path().join("plan.json");
    write_plan(&plan, TINY_PLAN);

    let out = booster(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--train",
        "250",
        "--test",
        "60",
        "--seed",
        "5",
    ]);
    assert_eq!(code(&out), 0);

    let args = [
        "train",
        "--plan",
        plan.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ];
    let first = booster(&args);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert!(run.join("epoch_001/model.ckpt").exists());

    // Rerunning a finished run replays its metrics without retraining.
    let again = booster(&args);
    assert_eq!(code(&again), 0);
    assert_eq!(stdout(&first), stdout(&again));

    // A different plan against the same directory is refused.
    let other = dir.path().join("other.json");
    write_plan(&other, &TINY_PLAN.replace("\"seed\": 9", "\"seed\": 10"));
    let clash = booster(&[
        "train",
        "--plan",
        other.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&clash), 2);

    for signal in ["null", "booster", "pool"] {
        let out = booster(&[
            "eval",
            "--ckpt",
            run.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--attack",
            "fgsm",
            "--signal",
            signal,
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let text = stdout(&out);
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("split,attack,signal_mode,epsilon,accuracy,grad_mean,grad_p50")
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with(&format!("test,fgsm,{signal},")), "{row}");
    }

    let ck = [run.to_str().unwrap(), data.to_str().unwrap()];
    let gn = booster(&["analyze", "--ckpt", ck[0], "--data", ck[1], "--mode", "gradnorm"]);
    assert_eq!(code(&gn), 0);
    assert!(stdout(&gn).starts_with("bin_lo,bin_hi,count\n"));

    let ls = booster(&[
        "analyze",
        "--ckpt",
        ck[0],
        "--data",
        ck[1],
        "--mode",
        "landscape",
        "--image",
        "2",
    ]);
    assert_eq!(code(&ls), 0);
    // 21x21 grid plus header
    assert_eq!(stdout(&ls).lines().count(), 1 + 21 * 21);

    let csv_path = dir.path().join("curve.csv");
    let cv = booster(&[
        "analyze",
        "--ckpt",
        ck[0],
        "--data",
        ck[1],
        "--mode",
        "curve",
        "--eps",
        "0,0.0156862745",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&cv), 0);
    let text = stdout(&cv);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epsilon,accuracy");
    assert_eq!(lines.len(), 3, "one row per epsilon: {text}");
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), text);

    let sw = booster(&[
        "sweep",
        "--kind",
        "subset",
        "--values",
        "64",
        "--plan",
        plan.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("sweep").to_str().unwrap(),
    ]);
    assert_eq!(code(&sw), 0, "{}", String::from_utf8_lossy(&sw.stderr));
    assert!(dir.path().join("sweep/sweep.csv").exists());
    assert!(dir.path().join("sweep/subset_64").exists());
}

#[test]
fn zero_epoch_run_is_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    booster(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--train",
        "60",
        "--test",
        "30",
        "--seed",
        "1",
    ]);
    let plan = dir.path().join("plan.json");
    write_plan(&plan, &TINY_PLAN.replace("\"epochs\": 1", "\"epochs\": 0"));
    let run = dir.path().join("run");
    let out = booster(&[
        "train",
        "--plan",
        plan.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let ev = booster(&[
        "eval",
        "--ckpt",
        run.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--attack",
        "none",
        "--signal",
        "booster",
    ]);
    assert_eq!(code(&ev), 0, "{}", String::from_utf8_lossy(&ev.stderr));
}

#[test]
fn verify_unit_only_writes_full_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.csv");
    let out = verify_bin(&[
        "--unit-only",
        "--out",
        report.to_str().unwrap(),
        "--scratch",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("check,status,measured,threshold,runtime_s"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 37);
    assert!(rows.iter().all(|r| r.contains(",pass,")), "{text}");
}
