use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "scenario.nodes=2",
    "--set",
    "scenario.steps=5",
    "--set",
    "planner.horizon_T=2",
    "--set",
    "planner.prune_width_Mu=4",
    "--set",
    "experiment.realizations=2",
];

fn fimrh(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fimrh"))
        .args(args)
        .args(SMALL)
        .arg("--out")
        .arg(out)
        .env_remove("FIMRH_OUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn reference_config() -> String {
    format!("{}/../../configs/reference.toml", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn run_writes_a_log_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = fimrh(&["run", "--config", &reference_config(), "--set", "planner.strategy=dp"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(report.contains("final fitness"));
    assert!(report.contains("location_m"));
    let log = fs::read_to_string(dir.path().join("run.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 1 + 5 + 1);
    for l in &lines {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }
    let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert!(header["version"].as_str().unwrap().starts_with("fimrh "));
    assert_eq!(header["config"]["planner"]["horizon_T"], 2);
    assert!(dir.path().join("run.timing.json").exists());
}

#[test]
fn runs_with_the_same_seed_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = fimrh(&["run", "--set", "scenario.seed=7"], d.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("run.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    let c = tempfile::tempdir().unwrap();
    fimrh(&["run", "--seed", "8"], c.path());
    assert_ne!(read(&a), read(&c));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = fimrh(&["run", "--config", "/no/such/config.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/config.toml"));

    let o = fimrh(&["validate-config", "--set", "planner.horizon_t=3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`planner.horizon_t`"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[solver]\nmax_iteratons = 3\n").unwrap();
    let o = fimrh(&["validate-config", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`solver.max_iteratons`"));

    let o = fimrh(&["validate-config", "--set", "cost.lambda=1.5"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda"));

    let o = fimrh(&["sweep", "--key", "planner.horizon", "--values", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("planner.horizon"));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // More exhaustive plans than the cap allows.
    let o = fimrh(&["run", "--set", "planner.dp_max_evaluations=10"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("dp_pruned"));
    let o = fimrh(&["experiment", "--summarize-only"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("10 of 10 runs are missing"));
}

#[test]
fn overrides_take_precedence_over_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    fs::write(&file, "[planner]\nhorizon_T = 4\nstrategy = \"greedy\"\n[cost]\nbeta = 1.7\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fimrh"))
        .args(["validate-config", "--config", file.to_str().unwrap(), "--set", "planner.horizon_T=3"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved: toml::Table = stdout(&o).parse().unwrap();
    assert_eq!(resolved["planner"]["horizon_T"].as_integer(), Some(3));
    assert_eq!(resolved["planner"]["strategy"].as_str(), Some("greedy"));
    assert_eq!(resolved["cost"]["beta"].as_float(), Some(1.7));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fimrh"))
        .arg("run")
        .args(SMALL)
        .env("FIMRH_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("run.jsonl").exists());
}

#[test]
fn experiment_writes_logs_and_prints_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = fimrh(&["experiment", "--workers", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(report.contains("estimation error"));
    assert!(report.contains("relative to dp"));
    let mut logs = 0;
    for s in ["random", "greedy", "dp_pruned", "dp", "dp_penalty"] {
        for r in 0..2 {
            assert!(dir.path().join(format!("runs/{s}/r{r:04}.jsonl")).exists());
            logs += 1;
        }
    }
    assert_eq!(logs, 10);
    let before = fs::read(dir.path().join("summary.csv")).unwrap();
    let o = fimrh(&["experiment", "--summarize-only"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(dir.path().join("summary.csv")).unwrap(), before);
    fs::remove_file(dir.path().join("runs/dp/r0001.jsonl")).unwrap();
    let o = fimrh(&["experiment", "--summarize-only"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("1 of 10 runs are missing"));
}

fn sweep_rows(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("sweep.csv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn horizon_one_sweep_matches_greedy() {
    let dir = tempfile::tempdir().unwrap();
    let o = fimrh(
        &["sweep", "--key", "planner.horizon_T", "--values", "1", "2", "--set", "experiment.strategies=[\"greedy\",\"dp\"]"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = sweep_rows(dir.path());
    let values: std::collections::BTreeSet<_> = rows.iter().map(|r| r[0].clone()).collect();
    assert_eq!(values.len(), 2);
    let at_one: Vec<_> = rows.iter().filter(|r| r[0] == "1").collect();
    assert_eq!(at_one.iter().filter(|r| r[1] == "greedy").count(), 4);
    for g in at_one.iter().filter(|r| r[1] == "greedy") {
        let d = at_one.iter().find(|r| r[1] == "dp" && r[2] == g[2]).unwrap();
        assert_eq!(g[3..], d[3..], "metric {}", g[2]);
    }
}

#[test]
fn single_value_sweep_equals_an_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let o = fimrh(&["sweep", "--key", "cost.beta", "--values", "1.5"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let exp = tempfile::tempdir().unwrap();
    let o = fimrh(&["experiment", "--set", "cost.beta=1.5"], exp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a = fs::read(dir.path().join("sweep/cost.beta=1.5/summary.csv")).unwrap();
    let b = fs::read(exp.path().join("summary.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn beta_sweep_has_one_group_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = fimrh(
        &[
            "sweep",
            "--key",
            "cost.beta",
            "--values",
            "1.1",
            "1.5",
            "2.0",
            "--set",
            "experiment.strategies=[\"dp_penalty\"]",
            "--set",
            "experiment.realizations=1",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let values: std::collections::BTreeSet<_> = sweep_rows(dir.path()).iter().map(|r| r[0].clone()).collect();
    assert_eq!(values.into_iter().collect::<Vec<_>>(), ["1.1", "1.5", "2.0"]);
}
