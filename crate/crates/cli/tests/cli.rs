use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn flashopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flashopt"))
        .args(args)
        .env_remove("FLASHOPT_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Resolved config echoed on the first stdout line.
fn resolved(o: &Output) -> Value {
    let out = stdout(o);
    let line = out.lines().next().unwrap();
    serde_json::from_str(line.strip_prefix("config: ").unwrap()).unwrap()
}

const SMALL: &[&str] = &["--steps", "300", "--hidden", "16", "--n-samples", "1024"];

fn train(dir: &Path, name: &str, extra: &[&str]) -> (Output, Value) {
    let report = dir.join(name);
    let mut args = vec!["train", "--report", report.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = flashopt(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (o, read_json(&report))
}

#[test]
fn paired_reference_and_flash_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, r) = train(dir.path(), "r.json", &["--optimizer", "adamw", "--mode", "reference", "--seed", "0"]);
    let (_, f) = train(dir.path(), "f.json", &["--optimizer", "adamw", "--mode", "flash", "--seed", "0"]);

    let mut rc = r["config"].clone();
    rc["mode"] = f["config"]["mode"].clone();
    assert_eq!(rc, f["config"], "runs differ only in mode");
    assert_eq!(r["status"], "completed");

    let (lr, lf) = (r["final_loss"].as_f64().unwrap(), f["final_loss"].as_f64().unwrap());
    assert!((lf - lr).abs() / lr < 0.05, "reference {lr} flash {lf}");
    assert_eq!(r["memory"]["total"], 16.0);
    assert_eq!(f["memory"]["total"], 7.0);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--optimizer", "lion", "--seed", "4"];
    train(dir.path(), "a.json", &args);
    train(dir.path(), "b.json", &args);
    assert_eq!(
        std::fs::read(dir.path().join("a.json")).unwrap(),
        std::fs::read(dir.path().join("b.json")).unwrap()
    );
}

#[test]
fn config_file_sits_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"steps": 7, "seed": 3, "optimizer": "sgd", "hidden": [5]}"#).unwrap();
    let o = flashopt(&["train", "--config", cfg.to_str().unwrap(), "--steps", "5", "--n-samples", "128"]);
    assert_eq!(code(&o), 0);
    let c = resolved(&o);
    assert_eq!(c["steps"], 5);
    assert_eq!(c["seed"], 3);
    assert_eq!(c["hyper"]["optimizer"], "sgd");
    assert_eq!(c["hidden"], serde_json::json!([5]));
    assert!(stdout(&o).contains("completed: steps=5 "));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&flashopt(&["train", "--bogus"])), 1);
    assert_eq!(code(&flashopt(&["train", "--steps", "many"])), 1);
    assert_eq!(code(&flashopt(&["train", "--batch-size", "0"])), 1);
    assert_eq!(code(&flashopt(&["quant-bench"])), 1);
    assert_eq!(code(&flashopt(&["frobnicate"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"steps": 7, "nope": 1}"#).unwrap();
    let o = flashopt(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field `nope`"));

    assert_eq!(code(&flashopt(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.snap");
    assert_eq!(code(&flashopt(&["quant-bench", "--trajectory", missing.to_str().unwrap()])), 2);

    let bad = dir.path().join("bad.flop");
    std::fs::write(&bad, b"FLOP\x01\x00\x05\x00\x00\x00").unwrap();
    let o = flashopt(&["ckpt", "inspect", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
}

#[test]
fn diverged_run_exits_3_and_still_reports() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("d.json");
    let o = flashopt(&[
        "train",
        "--optimizer", "sgd",
        "--dataset", "linear-regression",
        "--lr", "50",
        "--steps", "200",
        "--hidden", "8",
        "--n-samples", "256",
        "--report", report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    let r = read_json(&report);
    assert_eq!(r["status"], "diverged");
    assert!(r["final_loss"].is_null());
}

#[test]
fn checkpoint_inspect_reports_payload_totals() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f.flop");
    let r = dir.path().join("r.flop");
    for (mode, path) in [("flash", &f), ("reference", &r)] {
        let o = flashopt(&["ckpt", "create", "--mode", mode, "--params", "1000000", "--out", path.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    let o = flashopt(&["ckpt", "inspect", f.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("payload bytes: 5125000\n"), "{out}");
    assert!(out.contains("state.correction"));

    let o = flashopt(&["ckpt", "inspect", "--json", r.to_str().unwrap()]);
    let info: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(info["payload_bytes"], 12_000_000);
}

#[test]
fn train_checkpoint_and_trajectory_feed_other_commands() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("run.flop");
    let snap = dir.path().join("run.snap");
    let csv = dir.path().join("nmse.csv");
    let o = flashopt(&[
        "train", "--preset", "quant-bench", "--optimizer", "adamw",
        "--steps", "60", "--hidden", "32", "--n-samples", "512",
        "--checkpoint", ck.to_str().unwrap(),
        "--trajectory", snap.to_str().unwrap(),
        "--snapshot-every", "20",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(resolved(&o)["mode"], "reference");

    let o = flashopt(&["ckpt", "inspect", ck.to_str().unwrap()]);
    assert!(stdout(&o).contains("layer1.bias.variance"));

    let o = flashopt(&["quant-bench", "--trajectory", snap.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,optimizer,buffer,scheme,nmse"));
    // 3 snapshots x 2 buffers x 2 schemes.
    assert_eq!(lines.count(), 12);
    assert!(stdout(&o).contains("adamw v companded: n=3"));
}

#[test]
fn sweep_is_worker_invariant_and_exact_for_fp16_normals() {
    let dir = tempfile::tempdir().unwrap();
    let run = |workers: &str, out: &Path| {
        flashopt(&[
            "sweep", "--format", "fp16", "--scheme", "ulp16",
            "--min-exponent-field", "100", "--max-exponent-field", "145",
            "--workers", workers, "--out", out.to_str().unwrap(),
        ])
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let o = run("1", &a);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("exact_fraction_normal=1.000000"), "{}", stdout(&o));
    assert_eq!(code(&run("3", &b)), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn workers_default_from_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_flashopt"))
        .args(["sweep", "--min-exponent-field", "127", "--max-exponent-field", "127"])
        .env("FLASHOPT_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(resolved(&o)["workers"], 2);
    let summary = stdout(&o);
    assert!(summary.contains("bf16 ulp16: visited=16777216 "), "{summary}");
}
