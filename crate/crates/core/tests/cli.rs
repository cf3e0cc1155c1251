use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tailatlas"))
}

fn write(name: &str, text: &str) -> PathBuf {
    let p = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

const SWAP: &str = r#"{"mode": "decompose",
  "base": {"transition": [["1/2", "1/2"], ["1/2", "1/2"]]},
  "fiber": {"kind": "finite", "size": 2, "maps": [[0, 1], [1, 0]]}}"#;

#[test]
fn passing_run_exits_zero_and_prints_the_report() {
    let cfg = write("swap.json", SWAP);
    let out = run(&["decompose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["header"]["mode"], "decompose");
    assert_eq!(v["passed"], true);
    assert_eq!(v["header"]["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn failed_check_exits_two() {
    let text = SWAP
        .replace(r#""mode": "decompose","#, r#""mode": "decompose", "test_hooks": {"corrupt_atom": true},"#)
        .replace("[[0, 1], [1, 0]]", "[[1, 0], [1, 0]]");
    let cfg = write("corrupt.json", &text);
    let report = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("corrupt.report.json");
    let out = run(&["decompose", "--config", cfg.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["passed"], false);
}

#[test]
fn input_errors_exit_one_with_a_path() {
    let bad = write("bad.json", &SWAP.replace(r#"["1/2", "1/2"]]"#, r#"["1/2", "1/3"]]"#));
    let out = run(&["decompose", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(".base.transition[1]"), "{err}");

    let out = run(&["decompose", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(1));

    let swap = write("swap2.json", SWAP);
    let out = run(&["lorentz", "--config", swap.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["decompose"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_override_changes_the_digest() {
    let cfg = write("swap3.json", SWAP);
    let digest = |seed: &str| {
        let out = run(&["decompose", "--config", cfg.to_str().unwrap(), "--seed", seed]);
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        v["header"]["config_digest"].as_str().unwrap().to_string()
    };
    assert_eq!(digest("1"), digest("1"));
    assert_ne!(digest("1"), digest("2"));
}

#[test]
fn lorentz_run_writes_the_csv() {
    let csv = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("traj.csv");
    let text = format!(
        r#"{{"mode": "lorentz", "seed": 5, "lorentz": {{"preset": "finite-horizon-tube", "trajectories": 50, "collisions": 100, "checkpoints": [50, 100]}}, "output": {{"csv": {:?}}}}}"#,
        csv.to_str().unwrap()
    );
    let cfg = write("tube.json", &text);
    let out = run(&["lorentz", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let body = std::fs::read_to_string(csv).unwrap();
    let mut lines = body.lines();
    assert_eq!(lines.next(), Some("trajectory_id,checkpoint,dx,dy,returned_by_checkpoint"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("")));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["header"]["note"].as_str().unwrap().contains("surrogate"));
}

#[test]
fn k_mode_reports_the_quotient() {
    let text = r#"{"mode": "k-decompose", "base": {"transition": [["1/2", "1/2"], ["1/2", "1/2"]]},
      "fiber": {"kind": "finite", "size": 2, "maps": [[1, 0], [1, 0]]}, "k": {"depth": 3}}"#;
    let cfg = write("k.json", text);
    let out = run(&["k-decompose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["body"]["quotient"]["class_count"], 8);
    assert_eq!(v["body"]["decomposition"]["components"][0]["kind"]["period"], 2);
}
