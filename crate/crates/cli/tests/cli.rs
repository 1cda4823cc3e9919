//! End-to-end tests of the `bdlab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bdlab_cli::RunRecord;
use serde_json::Value;

fn bdlab(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bdlab"));
    cmd.args(args).env_remove("BDLAB_OUT_DIR");
    if let Some(dir) = out {
        cmd.env("BDLAB_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        )
    })
}

fn only_run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn list_catalogs() {
    let o = bdlab(&["list", "functionals"], None);
    assert_eq!(o.status.code(), Some(0));
    let names: Vec<String> = stdout_json(&o)
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["name"].as_str().unwrap().to_string())
        .collect();
    for want in ["linear", "quadratic", "two_mark", "diverging"] {
        assert!(names.iter().any(|n| n == want), "{want}");
    }
    let policies = stdout_json(&bdlab(&["list", "policies"], None));
    for want in ["constant", "linear_feedback", "follmer"] {
        assert!(
            policies.as_array().unwrap().iter().any(|p| p == want),
            "{want}"
        );
    }
    let experiments = stdout_json(&bdlab(&["list", "experiments"], None));
    assert!(experiments
        .as_array()
        .unwrap()
        .iter()
        .any(|p| p == "acceptance"));
    assert_eq!(bdlab(&["list", "colours"], None).status.code(), Some(2));
}

#[test]
fn lhs_of_zero_is_zero() {
    let o = bdlab(
        &["lhs", "--functional", "zero", "--n", "100", "--no-write"],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = stdout_json(&o);
    assert_eq!(r["results"]["lhs"]["value"], 0.0);
    assert_eq!(r["passed"], true);
}

#[test]
fn gap_example_writes_a_replayable_run() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "gap",
        "--functional",
        "linear:a=1",
        "--policy",
        "constant:1",
        "--n",
        "1e6",
        "--seed",
        "7",
    ];
    let o = bdlab(&args, Some(tmp.path()));
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let gap = &stdout_json(&o)["results"]["gap"];
    let (g, se) = (
        gap["gap"].as_f64().unwrap(),
        gap["gap_se"].as_f64().unwrap(),
    );
    assert!(g.abs() <= 3.0 * se, "gap {g} se {se}");

    let dir = only_run_dir(tmp.path());
    let record: RunRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.join("record.json")).unwrap()).unwrap();
    assert!(dir
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .ends_with(&record.config_hash));
    assert!(dir.join("config.json").is_file());
    assert_eq!(record.config.n, 1_000_000);
    assert_eq!(record.passed, record.recompute_passed());

    let o = bdlab(
        &[
            "replay",
            dir.to_str().unwrap(),
            "--threads",
            "1",
            "--no-write",
        ],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(stdout_json(&o)["identical"], true);

    let o = bdlab(
        &[
            "gap",
            "--config",
            dir.join("config.json").to_str().unwrap(),
            "--threads",
            "2",
            "--no-write",
        ],
        None,
    );
    let rerun = stdout_json(&o);
    assert_eq!(
        rerun["results"],
        serde_json::to_value(&record.results).unwrap()
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let args = |t: &'static str| {
        vec![
            "rhs",
            "--functional",
            "quadratic:c=0.25",
            "--policy",
            "ou",
            "--n",
            "30000",
            "--steps",
            "50",
            "--threads",
            t,
            "--no-write",
        ]
    };
    let one = stdout_json(&bdlab(&args("1"), None));
    let three = stdout_json(&bdlab(&args("3"), None));
    assert_eq!(one["results"], three["results"]);
    assert_eq!(one["threads"], 1);
    assert_eq!(three["threads"], 3);
}

#[test]
fn failing_check_exits_one() {
    let o = bdlab(
        &[
            "gap",
            "--functional",
            "linear:a=1",
            "--policy",
            "zero",
            "--n",
            "20000",
            "--max-gap",
            "0",
            "--no-write",
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout_json(&o)["passed"], false);
}

#[test]
fn module_errors_are_recorded() {
    let o = bdlab(&["ou-ehc", "--field", "exp", "--no-write"], None);
    assert_eq!(o.status.code(), Some(1));
    let r = stdout_json(&o);
    assert!(r["error"].as_str().unwrap().contains("L¹"), "{r}");
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"experimnet": "lhs"}"#).unwrap();
    for args in [
        vec!["lhs", "--config", bad.to_str().unwrap(), "--no-write"],
        vec!["lhs", "--n", "0", "--no-write"],
        vec!["lhs", "--lhs-method", "guess", "--no-write"],
        vec!["suite", "--name", "nope", "--no-write"],
        vec!["truncation-sweep", "--truncation", "sideways", "--no-write"],
    ] {
        let o = bdlab(&args, None);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn sweep_writes_a_csv_with_header() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bdlab(
        &[
            "truncation-sweep",
            "--functional",
            "quadratic:c=0.25",
            "--n",
            "2000",
            "--steps",
            "10",
        ],
        Some(tmp.path()),
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(only_run_dir(tmp.path()).join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("level,lhs,lhs_se,rhs,rhs_se"));
    assert_eq!(lines.count(), 8);
}

#[test]
fn suite_subset_aggregates_status() {
    let o = bdlab(
        &["suite", "--name", "acceptance:7,8,10", "--no-write"],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let stderr = String::from_utf8_lossy(&o.stderr);
    for id in [7, 8, 10] {
        assert!(
            stderr.contains(&format!("criterion {id}: PASS")),
            "{stderr}"
        );
    }
}

#[test]
fn out_flag_overrides_env() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let o = bdlab(
        &[
            "lsi",
            "--field",
            "sin",
            "--out",
            flag_dir.path().to_str().unwrap(),
        ],
        Some(env_dir.path()),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(only_run_dir(flag_dir.path()).join("record.json").is_file());
    assert_eq!(std::fs::read_dir(env_dir.path()).unwrap().count(), 0);
}
