use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scenario(name: &str) -> PathBuf {
    root().join("scenarios").join(format!("{name}.toml"))
}

fn obsv(args: &[&str], scenario: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obsv"))
        .args(args)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .env_remove("OBSV_LOG")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn validate(doc: &Value, schema: &str) {
    let schema = read_json(&root().join("docs").join(schema));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| l.split(',').nth(idx).unwrap().parse().unwrap())
        .collect()
}

fn patched(name: &str, from: &str, to: &str, dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(scenario(name)).unwrap();
    assert!(text.contains(from));
    let path = dir.join(format!("{name}-patched.toml"));
    std::fs::write(&path, text.replace(from, to)).unwrap();
    path
}

#[test]
fn planar_truth_starts_at_initial_condition() {
    let dir = tempfile::tempdir().unwrap();
    let out = obsv(&["simulate"], &scenario("planar-example"), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,x1,x2,y1,u1");
    let first: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|c| c.parse().unwrap())
        .collect();
    assert_eq!(first, vec![0.0, 2.0, 0.0, 2.0, 1.0]);
    assert!(!csv.contains('\r'));
    for cell in csv.lines().nth(5).unwrap().split(',') {
        let mantissa = cell.split('e').next().unwrap().replace(['-', '.'], "");
        assert_eq!(mantissa.len(), 17, "{cell}");
    }
    validate(
        &read_json(&dir.path().join("summary.json")),
        "summary.schema.json",
    );
}

#[test]
fn scalar_output_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    obsv(&["simulate"], &scenario("scalar-trivial"), dir.path());
    let csv = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    assert!(column(&csv, "y1").iter().all(|y| *y == 7.0));
}

#[test]
fn chain_output_is_time() {
    let dir = tempfile::tempdir().unwrap();
    obsv(&["simulate"], &scenario("linear-chain-2"), dir.path());
    let csv = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    for (t, y) in column(&csv, "t").iter().zip(column(&csv, "y1")) {
        assert!((t - y).abs() < 1e-10);
    }
}

#[test]
fn bundled_scenarios_pass_check() {
    for name in [
        "planar-example",
        "planar-saturated",
        "linear-chain-2",
        "scalar-trivial",
    ] {
        let dir = tempfile::tempdir().unwrap();
        let out = obsv(&["check"], &scenario(name), dir.path());
        assert_eq!(
            out.status.code(),
            Some(0),
            "{name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let summary = read_json(&dir.path().join("summary.json"));
        validate(&summary, "summary.schema.json");
        let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(stdout, summary["verdicts"]);
        assert_eq!(stdout["h2"], true);
        assert_eq!(stdout["pe"], true);
        assert_eq!(stdout["contraction"], true);
    }
}

#[test]
fn broken_chain_fails_h2_and_pe() {
    let dir = tempfile::tempdir().unwrap();
    let path = patched("planar-example", "a = [\"u1\"]", "a = [\"0\"]", dir.path());
    let out = obsv(&["check"], &path, dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("H2"));
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["verdicts"]["h2"], false);
    assert_eq!(summary["verdicts"]["pe"], false);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = patched(
        "planar-example",
        "steps = 1000",
        "steps = \"many\"",
        dir.path(),
    );
    let out = obsv(&["simulate"], &path, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));

    let out = obsv(&["observe"], &scenario("planar-example"), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("observer"));

    let out = obsv(&["simulate"], &dir.path().join("missing.toml"), dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grid_too_coarse_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = patched("planar-example", "radius = 3.0", "radius = 1e9", dir.path());
    let out = obsv(&["estimate"], &path, dir.path());
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("too coarse"));
}

#[test]
fn planar_estimate_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let out = obsv(&["estimate"], &scenario("planar-example"), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("estimates.csv")).unwrap();
    let err = column(&csv, "error");
    for w in err.windows(2) {
        assert!(w[1] < w[0], "{err:?}");
    }
    assert!(*err.last().unwrap() < 1e-3);
    let summary = read_json(&dir.path().join("summary.json"));
    validate(&summary, "summary.schema.json");
    assert_eq!(summary["estimate"]["converged"], true);
    assert_eq!(summary["iterations"].as_array().unwrap().len(), err.len());
}

#[test]
fn dead_beat_is_flagged() {
    for name in ["linear-chain-2", "scalar-trivial"] {
        let dir = tempfile::tempdir().unwrap();
        let out = obsv(&["estimate"], &scenario(name), dir.path());
        assert_eq!(out.status.code(), Some(0));
        let summary = read_json(&dir.path().join("summary.json"));
        assert_eq!(summary["estimate"]["dead_beat"], true);
        assert_eq!(summary["iterations"].as_array().unwrap().len(), 1);
        assert!(summary["estimate"]["final_error"].as_f64().unwrap() < 1e-6);
    }
}

#[test]
fn case_two_rows_carry_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let path = patched(
        "planar-example",
        "case = \"I\"\nradius = 3.0\nell = 0.5\nn_iters = 15",
        "case = \"II\"\nradius = 3.0\nell = 0.5\nn_iters = 8",
        dir.path(),
    );
    let out = obsv(&["estimate"], &path, dir.path());
    assert!(matches!(out.status.code(), Some(0) | Some(4)));
    let summary = read_json(&dir.path().join("summary.json"));
    validate(&summary, "summary.schema.json");
    for row in summary["iterations"].as_array().unwrap() {
        let nu = row["nu"].as_u64().unwrap();
        if nu > 3 {
            assert!(row["error"].as_f64().unwrap() <= row["bound"].as_f64().unwrap());
        } else {
            assert!(row["bound"].is_null());
        }
    }
}

#[test]
fn chain_observer_is_dead_beat() {
    let dir = tempfile::tempdir().unwrap();
    let out = obsv(&["observe"], &scenario("linear-chain-2"), dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let resets = read_json(&dir.path().join("resets.json"));
    validate(&resets, "resets.schema.json");
    assert!(resets["resets"][1]["error"].as_f64().unwrap() < 1e-6);
    let csv = std::fs::read_to_string(dir.path().join("observer.csv")).unwrap();
    assert!(csv.starts_with("t,xhat1,xhat2,x1,x2,error\n"));
}

#[test]
fn strict_rejects_unverified_lipschitz() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("planar-example")).unwrap()
        + "\n[observer]\nsigma = 0.5\nn_resets = 2\n";
    let path = dir.path().join("cubic.toml");
    std::fs::write(&path, text).unwrap();
    let out = obsv(&["observe", "--strict"], &path, dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lipschitz"));
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["verdicts"]["lipschitz_verified"], false);
    assert!(!dir.path().join("observer.csv").exists());
}

#[test]
fn seed_flag_overrides_scenario() {
    let dir = tempfile::tempdir().unwrap();
    obsv(
        &["check", "--seed", "99"],
        &scenario("scalar-trivial"),
        dir.path(),
    );
    assert_eq!(read_json(&dir.path().join("summary.json"))["seed"], 99);
}

#[test]
fn timings_are_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    obsv(&["simulate"], &scenario("scalar-trivial"), dir.path());
    assert!(read_json(&dir.path().join("summary.json"))
        .get("timings")
        .is_none());
    obsv(
        &["simulate", "--timings"],
        &scenario("scalar-trivial"),
        dir.path(),
    );
    let summary = read_json(&dir.path().join("summary.json"));
    validate(&summary, "summary.schema.json");
    assert_eq!(summary["timings"][0]["phase"], "simulate");
}
