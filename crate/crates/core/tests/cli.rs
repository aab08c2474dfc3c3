use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lmmsim::profiles::preset_targets;
use serde_json::{json, Value};

fn lmmsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmmsim")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn minimal() -> Value {
    json!({
        "model": "internvl-26b",
        "cluster": {"servers": 1},
        "pools": [{"kind": "Image", "count": 2, "tp": 1}, {"kind": "Text", "count": 1, "tp": 4}],
        "workload": {"generator": {"base_rate": 1.0, "image_request_fraction": 0.5}},
        "slo": {"slo_factor": 5.0},
        "horizon_ms": 60000.0,
        "drain_ms": 120000.0,
        "seeds": [1, 2]
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

#[test]
fn simulate_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &minimal());
    let out = dir.path().join("out");
    let o = lmmsim(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("summary.json").is_file());
    for seed in [1, 2] {
        let d = out.join(format!("seed-{seed}"));
        assert!(d.join("requests.csv").is_file());
        assert!(d.join("series.csv").is_file());
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &minimal());
    let csv = |out: &str| {
        let out = dir.path().join(out);
        let o = lmmsim(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "4"]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("seed-4").join("requests.csv")).unwrap()
    };
    assert_eq!(csv("a"), csv("b"));
}

#[test]
fn missing_trace_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal();
    v["workload"] = json!({"trace": "nowhere.csv"});
    let cfg = write_config(dir.path(), "run.json", &v);
    let o = lmmsim(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("workload.trace"), "{}", stderr(&o));
}

#[test]
fn malformed_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"model\": \"internvl-26b\",\n  \"horizon_ms\": oops\n}\n").unwrap();
    let o = lmmsim(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn sweep_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal();
    v["cluster"]["servers"] = json!(2);
    let cfg = write_config(dir.path(), "run.json", &v);
    let out = dir.path().join("out");
    let o = lmmsim(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--axis",
        "instance_ratio",
        "--values",
        "1:3,2:3,4:2,6:2,8:1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let values: Vec<String> = r.records().map(|rec| rec.unwrap()[1].to_string()).collect();
    assert_eq!(values, ["1:3", "2:3", "4:2", "6:2", "8:1"]);
}

#[test]
fn unknown_axis_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &minimal());
    let o = lmmsim(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "colour", "--values", "1,2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn calibrate_caches_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let first = lmmsim(&["calibrate", "--model", "internvl-26b", "--out", out]);
    assert!(first.status.success(), "{}", stderr(&first));
    let path = dir.path().join("profiles").join("internvl-26b.json");
    assert!(path.is_file());
    assert!(String::from_utf8_lossy(&first.stdout).starts_with("wrote"));

    let again = lmmsim(&["calibrate", "--model", "internvl-26b", "--out", out]);
    assert!(String::from_utf8_lossy(&again.stdout).starts_with("reused"));
    let forced = lmmsim(&["calibrate", "--model", "internvl-26b", "--out", out, "--force"]);
    assert!(String::from_utf8_lossy(&forced.stdout).starts_with("wrote"));
}

#[test]
fn inconsistent_targets_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = serde_json::to_value(preset_targets("internvl-26b").unwrap()).unwrap();
    t["ttft_breakdown"]["Encode"] = json!(0.6);
    let targets = write_config(dir.path(), "targets.json", &t);
    let o = lmmsim(&[
        "calibrate",
        "--model",
        "internvl-26b",
        "--targets",
        targets.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ttft_breakdown"), "{}", stderr(&o));
}

#[test]
fn infeasible_capacity_reports_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal();
    v["slo"] = json!({"slo_factor": 0.5});
    v["seeds"] = json!([1, 2, 3]);
    let cfg = write_config(dir.path(), "run.json", &v);
    let out = dir.path().join("out");
    let o = lmmsim(&["capacity", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rate=0.0000"));
    assert!(stderr(&o).contains("warning"));
    assert!(out.join("capacity.json").is_file());
}
