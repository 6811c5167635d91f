use std::path::Path;
use std::process::Command;

use serde_json::Value;
use sha2::{Digest, Sha256};

fn run(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_manyserver")).args(args).output().expect("spawn manyserver")
}

fn ok(args: &[&str]) {
    let o = run(args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_manifest_complete(dir: &Path) {
    let m = json(&dir.join("manifest.json"));
    let files = m["files"].as_array().unwrap();
    let mut on_disk: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let mut listed: Vec<String> = files.iter().map(|f| f["name"].as_str().unwrap().to_string()).collect();
    listed.sort();
    assert_eq!(on_disk, listed);
    for f in files {
        let bytes = std::fs::read(dir.join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), f["sha256"].as_str().unwrap());
    }
}

#[test]
fn verify_distribution_lomax_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    ok(&["verify-distribution", "--family", "lomax", "--params", "shape=3,scale=2", "--out", out.to_str().unwrap()]);
    let r = json(&out.join("assumptions.json"));
    assert!(r["pass"].as_object().unwrap().values().all(|v| v == true), "{r}");
    assert_manifest_complete(&out);
}

#[test]
fn identical_coupling_gives_zero_decay_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"x0": 0.5, "x0_tilde": 0.5, "grid": {"dt": 0.02, "t_max": 2.0, "r_max": 4.0}, "decay_times": [0.5, 1.0, 2.0]}"#).unwrap();
    let out = tmp.path().join("c");
    ok(&["coupling", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let mut rdr = csv::Reader::from_path(out.join("decay.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        for (h, v) in headers.iter().zip(rec.iter()) {
            if h != "t" {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{h}");
            }
        }
        rows += 1;
    }
    assert_eq!(rows, 3);
    assert_manifest_complete(&out);
}

#[test]
fn diffusion_outputs_are_reproducible_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let common = ["--dt", "0.05", "--t-max", "1", "--r-max", "2", "--reps", "3", "--seed", "9"];
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let mut args = vec!["simulate-diffusion", "--out", a.to_str().unwrap(), "--threads", "1"];
    args.extend(common);
    ok(&args);
    let mut args = vec!["simulate-diffusion", "--out", b.to_str().unwrap(), "--threads", "3"];
    args.extend(common);
    ok(&args);
    for f in ["paths.csv", "snapshots.csv", "residuals.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let r = json(&a.join("residuals.json"));
    assert!(r["boundary_max"].as_f64().unwrap() < 1e-6);
    assert_eq!(r["seeds"].as_array().unwrap().len(), 3);
    assert_manifest_complete(&a);
}

#[test]
fn invalid_config_fails_without_leftovers() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let o = run(&["simulate-diffusion", "--beta", "-1", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("β"));
    assert!(!out.exists());
    // Fails after the directory is created: an off-grid probe.
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"grid": {"dt": 0.1, "t_max": 1.0, "r_max": 1.0}, "probes": [0.55]}"#).unwrap();
    let o = run(&["simulate-diffusion", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn queue_invariants_hold() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("q.json");
    std::fs::write(&cfg, r#"{"grid": {"dt": 0.1, "t_max": 3.0, "r_max": 2.0}, "reps": 4, "queue": {"n": 50}}"#).unwrap();
    let out = tmp.path().join("q");
    ok(&["simulate-queue", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let r = json(&out.join("invariants.json"));
    assert_eq!(r["clean"], true);
    assert!(r["events"].as_u64().unwrap() > 100);
    assert_manifest_complete(&out);
}

#[test]
fn convergence_order_reports_first_order() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    ok(&["convergence-order", "--dt", "0.004", "--t-max", "1", "--r-max", "2", "--seed", "1", "--out", out.to_str().unwrap()]);
    let r = json(&out.join("orders.json"));
    assert!(r["res_z"]["slope"].as_f64().unwrap() >= 0.9, "{r}");
    assert!(r["min_order"].as_f64().unwrap() >= 0.9, "{r}");
}

#[test]
fn stationary_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    ok(&["stationary", "--family", "exponential", "--params", "rate=1", "--dt", "0.05", "--t-max", "2", "--r-max", "4", "--reps", "6", "--out", out.to_str().unwrap()]);
    let r = json(&out.join("summary.json"));
    assert_eq!(r["x_t"]["n"], 6);
    assert_manifest_complete(&out);
}
