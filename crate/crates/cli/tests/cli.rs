use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use isto::cia::{BinaryGrid, RelaxedGrid};
use isto::model::{DoubleTankParams, Trajectory};
use isto::seqopt::read_log_json;
use isto_cli::commands::{self, IstoSummary, RelaxReport, RoundReport};
use isto_cli::RunConfig;

fn isto(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isto"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_reader(fs::File::open(path).unwrap()).unwrap()
}

/// JSON value with every timing field removed.
fn untimed(path: &Path) -> serde_json::Value {
    fn strip(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(m) => {
                m.retain(|k, _| k != "wall_time" && k != "runtimes");
                m.values_mut().for_each(strip);
            }
            serde_json::Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v: serde_json::Value = read_json(path);
    strip(&mut v);
    v
}

#[test]
fn tiny_relax_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = isto(&["relax", "--nodes", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: RelaxReport = read_json(&dir.path().join(commands::RELAXED_REPORT));
    assert!(report.objective.is_finite());
    assert_eq!(report.nodes, 2);
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "tf = 0\n").unwrap();
    let out = isto(&["relax", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = isto(&["relax", "--set", "nodes=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = isto(&["round", "--grid", "/nonexistent/grid.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = isto(&["isto", "--sequence", "12"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_grid_passes_through_rounding() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { nodes: 21, min_uptime: 0.0, out_dir: dir.path().to_path_buf(), ..RunConfig::default() };
    commands::relax(&cfg).unwrap();
    let (relaxed, labels) =
        RelaxedGrid::read_csv(fs::File::open(dir.path().join(commands::RELAXED_GRID)).unwrap()).unwrap();
    let binary = BinaryGrid {
        intervals: relaxed.intervals.clone(),
        values: (0..relaxed.intervals.len()).map(|k| vec![(k % 3 == 0) as u8, (k % 2) as u8]).collect(),
    };
    let grid_path = dir.path().join("given.csv");
    binary.write_csv(&labels, fs::File::create(&grid_path).unwrap()).unwrap();
    let report = commands::round(&cfg, Some(&grid_path), None).unwrap();
    assert_eq!(report.cia.eta, 0.0);
    let (out, _) = BinaryGrid::read_csv(fs::File::open(dir.path().join(commands::BINARY_GRID)).unwrap()).unwrap();
    assert_eq!(out, binary);
}

#[test]
fn default_projection_fails_to_track() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { out_dir: dir.path().to_path_buf(), ..RunConfig::default() };
    commands::relax(&cfg).unwrap();
    let constrained = commands::round(&cfg, None, None).unwrap();
    let cost = constrained.cia.simulated_cost.unwrap();
    assert!(cost > 100.0, "projected cost {cost}");
    let free = commands::round(&RunConfig { min_uptime: 0.0, ..cfg.clone() }, None, None).unwrap();
    assert!(free.cia.simulated_cost.unwrap() < 0.5 * cost);
    // the report and the trajectory read back
    let back: RoundReport = read_json(&dir.path().join(commands::ROUND_REPORT));
    assert_eq!(back, free);
    let spec = DoubleTankParams::default().problem();
    let traj = Trajectory::read_csv(&spec, fs::File::open(dir.path().join(commands::PROJECTED_TRAJECTORY)).unwrap())
        .unwrap();
    assert!((traj.total_cost() - free.cia.simulated_cost.unwrap()).abs() < 1e-9);
}

#[test]
fn optimal_single_stage_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = isto(&["isto", "--sequence", "01", "--min-uptime", "0"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: IstoSummary = read_json(&dir.path().join("isto_solution.json"));
    assert_eq!(summary.iterations, 1);
    assert_eq!(summary.final_sequence, "01");
    let log = read_log_json(fs::File::open(dir.path().join("isto_log.json")).unwrap()).unwrap();
    assert_eq!(log.len(), 1);
    assert!(log[0].removed.is_empty());
}

#[test]
fn repeated_runs_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = isto(&["isto", "--sequence", "01,10,01", "--min-uptime", "0.5"], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = isto(&["simulate", dir.path().join("isto_trajectory.csv").to_str().unwrap()], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["isto_trajectory.csv", commands::SIMULATED_TRAJECTORY] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    for name in ["isto_solution.json", "isto_log.json"] {
        assert_eq!(untimed(&a.path().join(name)), untimed(&b.path().join(name)), "{name}");
    }
}

#[test]
fn simulating_a_solution_reproduces_its_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        sequence: isto_cli::config::parse_sequence("01,00").unwrap(),
        min_uptime: 0.0,
        out_dir: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let summary = commands::isto(&cfg, 0.0, "run").unwrap();
    let traj = commands::simulate_file(&cfg, &dir.path().join("run_trajectory.csv"), 0.0).unwrap();
    assert!((traj.total_cost() - summary.cost).abs() < 1e-6 * summary.cost);
}
