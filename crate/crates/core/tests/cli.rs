use std::path::Path;
use std::process::{Command, Output};

const SCENARIOS: [&str; 7] = ["exactness", "recursion", "bn", "expressibility", "disentangle", "overfit", "sgd"];

fn laddersim(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laddersim"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn report(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn every_scenario_passes_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for s in SCENARIOS {
        let out = dir.path().join(s);
        let o = laddersim(&[s, "--seed", "4"], &out);
        assert_eq!(o.status.code(), Some(0), "{s}: {}", String::from_utf8_lossy(&o.stdout));
        for f in ["report.json", "summary.txt", "trajectory.csv"] {
            assert!(out.join(f).is_file(), "{s} is missing {f}");
        }
        let r = report(&out);
        assert_eq!(r["scenario"], s);
        assert_eq!(r["seed"], 4);
        assert_eq!(r["pass"], true);
        let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
        assert_eq!(String::from_utf8_lossy(&o.stdout), summary);
    }
}

#[test]
fn reports_are_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        laddersim(&["sgd", "--seed", seed], &out);
        std::fs::read_to_string(out.join("report.json")).unwrap()
    };
    let a = read("a", "9");
    assert_eq!(a, read("b", "9"));
    assert_ne!(a, read("c", "10"));
}

#[test]
fn steps_and_lr_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let trajectory = |name: &str, args: &[&str]| {
        let out = dir.path().join(name);
        let mut full = vec!["exactness", "--seed", "1"];
        full.extend_from_slice(args);
        assert_eq!(laddersim(&full, &out).status.code(), Some(0));
        std::fs::read_to_string(out.join("trajectory.csv")).unwrap()
    };
    let short = trajectory("short", &["--steps", "7"]);
    // header plus the initial state plus one row per step
    assert_eq!(short.lines().count(), 9);
    let slow = trajectory("slow", &["--steps", "7", "--lr", "0.001"]);
    assert_eq!(slow.lines().count(), 9);
    assert_eq!(short.lines().nth(1), slow.lines().nth(1));
    assert_ne!(short.lines().nth(2), slow.lines().nth(2));
}

#[test]
fn tolerance_override_turns_a_check_red() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("overfit.json");
    std::fs::write(
        &config,
        r#"{"scenario": "overfit", "tolerances": {"update.spurious_to_true_ratio": 1e300}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = laddersim(&["overfit", "--seed", "0", "--config", config.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    let r = report(&out);
    assert_eq!(r["pass"], false);
    let failed: Vec<&str> = r["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["update.spurious_to_true_ratio"]);
}

#[test]
fn bad_invocations_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = laddersim(&["nonsense", "--seed", "0"], dir.path());
    assert_ne!(o.status.code(), Some(0));
    let o = laddersim(&["overfit"], dir.path());
    assert_ne!(o.status.code(), Some(0));
    let o = laddersim(&["bn", "--seed", "0", "--config", "/nonexistent/config.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn enumeration_cap_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_laddersim"))
        .args(["exactness", "--seed", "0", "--out"])
        .arg(dir.path())
        .env("LADDERSIM_CAP", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("exceeds the cap of 2"));
}
