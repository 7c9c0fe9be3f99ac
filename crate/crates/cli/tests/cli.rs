use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn rollout(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rollout"))
        .args(args)
        .env_clear()
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &TempDir, name: &str, preset: &str, buses: usize, seed: u64) -> PathBuf {
    let file = dir.path().join(name);
    let out = rollout(&[
        "gen",
        "--preset",
        preset,
        "--buses",
        &buses.to_string(),
        "--seed",
        &seed.to_string(),
        "-o",
        path(&file),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    file
}

fn edit_buses(src: &Path, dst: &Path, f: impl Fn(&mut Value)) {
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(src).unwrap()).unwrap();
    for bus in doc["buses"].as_array_mut().unwrap() {
        f(bus);
    }
    fs::write(dst, doc.to_string()).unwrap();
}

fn scale_ratings(dir: &TempDir, src: &Path, factor: f64) -> PathBuf {
    let dst = dir.path().join(format!("scaled-{factor}.json"));
    edit_buses(src, &dst, |b| {
        b["rating"] = (b["rating"].as_f64().unwrap() * factor).into();
    });
    dst
}

#[test]
fn zero_rating_case_packs_into_one_slot() {
    let dir = TempDir::new().unwrap();
    let case = gen(&dir, "case.json", "default", 25, 3);
    let zero = scale_ratings(&dir, &case, 0.0);
    let out = rollout(&["solve", path(&zero), "--variant", "nonlinear"]);
    assert_eq!(code(&out), 0);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let slots = doc["slots"].as_array().unwrap();
    assert_eq!(slots.len(), 1);
    assert_eq!(slots[0].as_array().unwrap().len(), 25);
}

#[test]
fn repeated_solves_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let case = gen(&dir, "case.json", "heavy-load", 40, 1);
    let mut schedules = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = rollout(&["solve", path(&case), "--out-dir", path(&out_dir), "--verify"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        schedules.push(fs::read(out_dir.join("schedule.json")).unwrap());
        assert!(out_dir.join("margins.json").is_file());
    }
    assert_eq!(schedules[0], schedules[1]);
    assert_eq!(
        fs::read(dir.path().join("a/margins.json")).unwrap(),
        fs::read(dir.path().join("b/margins.json")).unwrap()
    );
}

#[test]
fn linearized_schedule_fails_verification() {
    let dir = TempDir::new().unwrap();
    let case = gen(&dir, "case.json", "heavy-load", 40, 1);
    let out_dir = dir.path().join("lin");
    let out = rollout(&[
        "solve",
        path(&case),
        "--variant",
        "linearized",
        "--out-dir",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 0);
    let schedule = out_dir.join("schedule.json");
    let out = rollout(&["verify", path(&case), "--schedule", path(&schedule)]);
    assert_eq!(code(&out), 8);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let negative = report["slots"].as_array().unwrap().iter().any(|s| {
        ["v_lower", "v_upper", "current"]
            .iter()
            .any(|k| s[k]["margin"].as_f64().is_some_and(|m| m < 0.0))
    });
    assert!(negative);

    let nl_dir = dir.path().join("nl");
    let out = rollout(&["solve", path(&case), "--out-dir", path(&nl_dir)]);
    assert_eq!(code(&out), 0);
    let out = rollout(&["verify", path(&case), "--schedule", path(&nl_dir.join("schedule.json"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn violation_still_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let case = gen(&dir, "case.json", "heavy-load", 40, 1);
    let out_dir = dir.path().join("run");
    let out = rollout(&[
        "solve",
        path(&case),
        "--variant",
        "linearized",
        "--verify",
        "--format",
        "csv",
        "--out-dir",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 8);
    for name in [
        "config.json",
        "bounds.json",
        "instance.bin",
        "instance.json",
        "schedule.json",
        "schedule.csv",
    ] {
        assert!(out_dir.join(name).is_file(), "{name} missing");
    }
    for name in ["margins.json", "margins.csv", "timings.json"] {
        assert!(out_dir.join(name).is_file(), "{name} missing");
    }
    let csv = fs::read_to_string(out_dir.join("margins.csv")).unwrap();
    assert!(csv.starts_with("slot_index,"));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let case = gen(&dir, "case.json", "heavy-load", 40, 1);

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&rollout(&["solve", path(&missing)])), 1);

    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(code(&rollout(&["solve", path(&garbage)])), 2);

    let invalid = dir.path().join("invalid.json");
    edit_buses(&case, &invalid, |b| b["r"] = (-0.01).into());
    assert_eq!(code(&rollout(&["solve", path(&invalid)])), 3);

    let collapse = scale_ratings(&dir, &case, 40.0);
    assert_eq!(code(&rollout(&["solve", path(&collapse)])), 4);

    let unsafe_nominal = scale_ratings(&dir, &case, 4.0);
    assert_eq!(code(&rollout(&["solve", path(&unsafe_nominal)])), 5);

    let infeasible = scale_ratings(&dir, &case, 2.0);
    assert_eq!(code(&rollout(&["solve", path(&infeasible)])), 6);

    assert_eq!(code(&rollout(&["build", path(&case)])), 3);
}

#[test]
fn build_writes_instance_container() {
    let dir = TempDir::new().unwrap();
    let case = gen(&dir, "case.json", "default", 12, 5);
    let out_dir = dir.path().join("inst");
    let out = rollout(&["build", path(&case), "--out-dir", path(&out_dir), "--sides-prime", "6"]);
    assert_eq!(code(&out), 0);
    let bin = fs::read(out_dir.join("instance.bin")).unwrap();
    assert_eq!(&bin[..4], b"RLHB");
    let meta: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("instance.json")).unwrap()).unwrap();
    assert_eq!(meta["sides_prime"], 6);
    assert!(out_dir.join("bounds.json").is_file());
}

#[test]
fn bounds_prints_json() {
    let dir = TempDir::new().unwrap();
    let case = gen(&dir, "case.json", "default", 10, 2);
    let out = rollout(&["bounds", path(&case)]);
    assert_eq!(code(&out), 0);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["v_sq_lo"].as_array().unwrap().len(), 10);
    assert_eq!(doc["converged"], true);
}

#[test]
fn environment_overrides_flags() {
    let dir = TempDir::new().unwrap();
    let case = gen(&dir, "case.json", "heavy-load", 40, 1);
    let out_dir = dir.path().join("env");
    let out = Command::new(env!("CARGO_BIN_EXE_rollout"))
        .args(["solve", path(&case)])
        .env_clear()
        .env("ROLLOUT_VARIANT", "linearized")
        .env("ROLLOUT_OUT_DIR", &out_dir)
        .env("ROLLOUT_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let config: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["variant"], "linearized");
}

#[test]
fn compare_reports_both_variants() {
    let dir = TempDir::new().unwrap();
    let case = gen(&dir, "case.json", "heavy-load", 40, 1);
    let out = rollout(&["compare", path(&case), "--samples", "128"]);
    assert_eq!(code(&out), 0);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let v = doc["variants"].as_array().unwrap();
    assert_eq!(v[0]["variant"], "nonlinear");
    assert_eq!(v[0]["exit_code"], 0);
    assert_eq!(v[1]["variant"], "linearized");
    assert_eq!(v[1]["exit_code"], 8);
    assert!(v[1]["slots"].as_u64().unwrap() <= v[0]["slots"].as_u64().unwrap());
    for s in v {
        assert!(s["timings"]["stages"].as_array().unwrap().len() >= 4);
    }
}

#[test]
fn gen_accepts_spec_document() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    let out = rollout(&["gen", "--buses", "8", "--seed", "4"]);
    assert_eq!(code(&out), 0);
    let from_flags = out.stdout;
    let spec_doc = serde_json::json!({
        "n_buses": 8, "branching": 3, "feeders": 1,
        "r_range": [0.002, 0.01], "x_range": [0.002, 0.01],
        "p_load_range": [0.005, 0.02], "q_ratio_range": [0.2, 0.5],
        "load_scale": 1.0, "inverter_fraction": 1.0,
        "rating": {"kind": "uniform", "min": 0.002, "max": 0.01},
        "generation": {"kind": "zero"},
        "current_limit": {"kind": "headroom", "factor": 3.0, "floor": 1e-3},
        "v0_sq": 1.0, "v_sq_min": 0.81, "v_sq_max": 1.21,
        "fault_clearing_time": 1.0, "base_mva": 1.0, "base_kv": 12.47,
        "seed": 4, "max_retries": 20
    });
    fs::write(&spec, spec_doc.to_string()).unwrap();
    let out = rollout(&["gen", "--spec", path(&spec)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(out.stdout, from_flags);
}
