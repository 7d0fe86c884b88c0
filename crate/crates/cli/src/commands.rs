use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use isto::cia::{solve_cia, BinaryGrid, CiaOptions, CiaReport, DwellConstraints, RelaxedGrid};
use isto::model::{reference, simulate, ProblemSpec, Trajectory};
use isto::nlp::SolverOptions;
use isto::relaxed::solve_relaxed;
use isto::seqopt::{run_isto, uptime_bounds, write_log_json, IstoFailure, IstoOptions, IterationRecord};
use isto::sto::StoReport;
use isto::{Error, Result};

use crate::config::{format_sequence, RunConfig};
use crate::plot::PLOT_SCRIPT;

pub const RELAXED_TRAJECTORY: &str = "relaxed_trajectory.csv";
pub const RELAXED_GRID: &str = "relaxed_grid.csv";
pub const RELAXED_REPORT: &str = "relaxed_report.json";
pub const BINARY_GRID: &str = "binary_grid.csv";
pub const PROJECTED_TRAJECTORY: &str = "projected_trajectory.csv";
pub const ROUND_REPORT: &str = "round_report.json";
pub const SIMULATED_TRAJECTORY: &str = "simulated_trajectory.csv";
pub const COMPARE_REPORT: &str = "compare.json";
pub const PLOT_FILE: &str = "plot.py";

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_)
        | Error::Precondition(_)
        | Error::Config(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => 2,
        Error::Infeasible(_) => 4,
        Error::IntegrationFailure { .. }
        | Error::Evaluation { .. }
        | Error::NotConverged { .. }
        | Error::IterationCap { .. }
        | Error::Malformed(_) => 3,
    }
}

fn solver_options(cfg: &RunConfig) -> SolverOptions {
    SolverOptions { execution: cfg.execution(), ..SolverOptions::default() }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidArgument(format!("cannot open {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut out = create(dir, name)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn write_trajectory(dir: &Path, name: &str, spec: &ProblemSpec, traj: &Trajectory) -> Result<()> {
    let mut out = create(dir, name)?;
    traj.write_csv(spec, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Largest `|x2 - r(t)|` over the nodes of a Double Tank trajectory.
pub fn max_tracking_error(traj: &Trajectory) -> f64 {
    traj.times
        .iter()
        .zip(&traj.states)
        .map(|(&t, x)| (x[1] - reference(t)).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxReport {
    pub nodes: usize,
    pub objective: f64,
    pub status: String,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub equality_residual: f64,
    pub kkt_residual: f64,
    pub wall_time: f64,
}

pub fn relax(cfg: &RunConfig) -> Result<RelaxReport> {
    let spec = cfg.validate()?;
    let clock = Instant::now();
    let sol = solve_relaxed(&spec, cfg.nodes, &solver_options(cfg))?;
    let report = RelaxReport {
        nodes: cfg.nodes,
        objective: sol.objective_value,
        status: format!("{:?}", sol.nlp.status),
        iterations: sol.nlp.iterations,
        outer_iterations: sol.nlp.outer_iterations,
        equality_residual: sol.nlp.equality_residual_norm,
        kkt_residual: sol.nlp.kkt_residual,
        wall_time: clock.elapsed().as_secs_f64(),
    };
    let dir = &cfg.out_dir;
    write_trajectory(dir, RELAXED_TRAJECTORY, &spec, &sol.trajectory)?;
    let mut out = create(dir, RELAXED_GRID)?;
    sol.control_grid.write_csv(&spec.labels.discrete, &mut out)?;
    out.flush()?;
    write_json(dir, RELAXED_REPORT, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    #[serde(flatten)]
    pub cia: CiaReport,
    pub max_tracking_error: f64,
}

/// Projects a relaxed grid under the configured minimum uptime and
/// simulates it with the continuous inputs of the relaxed trajectory.
pub fn round(cfg: &RunConfig, grid: Option<&Path>, trajectory: Option<&Path>) -> Result<RoundReport> {
    let spec = cfg.validate()?;
    let grid_path = grid.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(RELAXED_GRID));
    let traj_path = trajectory.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(RELAXED_TRAJECTORY));
    let (relaxed, labels) = RelaxedGrid::read_csv(open(&grid_path)?)?;
    if labels != spec.labels.discrete {
        return Err(Error::InvalidArgument(format!("grid columns {labels:?}, expected {:?}", spec.labels.discrete)));
    }
    let source = Trajectory::read_csv(&spec, open(&traj_path)?)?;
    if source.continuous.len() != relaxed.intervals.len() {
        return Err(Error::InvalidArgument(format!(
            "{} has {} intervals, the grid {}",
            traj_path.display(),
            source.continuous.len(),
            relaxed.intervals.len()
        )));
    }
    let clock = Instant::now();
    let opts = CiaOptions {
        constraints: DwellConstraints::min_uptime(cfg.min_uptime),
        execution: cfg.execution(),
        ..CiaOptions::default()
    };
    let sol = solve_cia(&relaxed, &opts)?;
    let wall_time = clock.elapsed().as_secs_f64();
    if !sol.optimal {
        log::warn!("node budget exhausted; writing the best grid found");
    }
    let traj = simulate(&spec, &sol.grid.to_schedule(source.continuous.clone())?, &spec.x0)?;
    let report = RoundReport {
        cia: CiaReport {
            eta: sol.bound.eta,
            eta_per_control: sol.bound.per_control.clone(),
            nodes_expanded: sol.nodes_expanded,
            optimal: sol.optimal,
            min_uptime: opts.constraints.min_uptime,
            min_downtime: opts.constraints.min_downtime,
            simulated_cost: Some(traj.total_cost()),
            wall_time,
        },
        max_tracking_error: max_tracking_error(&traj),
    };
    let dir = &cfg.out_dir;
    let mut out = create(dir, BINARY_GRID)?;
    sol.grid.write_csv(&spec.labels.discrete, &mut out)?;
    out.flush()?;
    write_trajectory(dir, PROJECTED_TRAJECTORY, &spec, &traj)?;
    write_json(dir, ROUND_REPORT, &report)?;
    Ok(report)
}

/// Result of an iSTO run as written next to its trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IstoSummary {
    pub min_uptime: f64,
    pub iterations: usize,
    pub initial_sequence: String,
    pub final_sequence: String,
    pub cost: f64,
    pub runtimes: Vec<f64>,
    pub solution: StoReport,
}

/// Runs the iterative STO and writes `<tag>_trajectory.csv`,
/// `<tag>_solution.json` and `<tag>_log.json`. The log is written even
/// when the run fails.
pub fn isto(cfg: &RunConfig, min_uptime: f64, tag: &str) -> std::result::Result<IstoSummary, Box<IstoFailure>> {
    let fail = |error: Error| Box::new(IstoFailure { error, records: Vec::new() });
    let spec = cfg.validate().map_err(fail)?;
    let opts = IstoOptions {
        nodes_per_stage: cfg.stage_nodes,
        solver: solver_options(cfg),
        ..IstoOptions::default()
    };
    let timing = uptime_bounds(&cfg.sequence, min_uptime);
    let result = run_isto(&spec, &cfg.sequence, &timing, &opts);
    let records: &[IterationRecord] = match &result {
        Ok(o) => &o.records,
        Err(f) => &f.records,
    };
    let write_log = |records: &[IterationRecord]| -> Result<()> {
        let mut out = create(&cfg.out_dir, &format!("{tag}_log.json"))?;
        write_log_json(records, &mut out)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    };
    if let Err(e) = write_log(records) {
        return Err(match result {
            Err(f) => f,
            Ok(_) => fail(e),
        });
    }
    let outcome = result?;
    let sol = &outcome.solution;
    let summary = IstoSummary {
        min_uptime,
        iterations: outcome.records.len(),
        initial_sequence: format_sequence(&cfg.sequence.stages),
        final_sequence: format_sequence(&sol.sequence.stages),
        cost: sol.cost,
        runtimes: outcome.records.iter().map(|r| r.wall_time).collect(),
        solution: sol.report(),
    };
    let written = write_trajectory(&cfg.out_dir, &format!("{tag}_trajectory.csv"), &spec, &sol.trajectory)
        .and_then(|_| write_json(&cfg.out_dir, &format!("{tag}_solution.json"), &summary));
    written.map_err(|e| Box::new(IstoFailure { error: e, records: outcome.records.clone() }))?;
    Ok(summary)
}

/// Re-simulates the inputs of a trajectory CSV, or of a control grid CSV
/// with `c2` held at `c2`, from the configured initial state.
pub fn simulate_file(cfg: &RunConfig, input: &Path, c2: f64) -> Result<Trajectory> {
    let spec = cfg.validate()?;
    let mut text = String::new();
    open(input)?.read_to_string(&mut text)?;
    let schedule = if text.starts_with("t_left") {
        let (grid, labels) = RelaxedGrid::read_csv(text.as_bytes())?;
        if labels != spec.labels.discrete {
            return Err(Error::InvalidArgument(format!("grid columns {labels:?}, expected {:?}", spec.labels.discrete)));
        }
        let [lo, hi] = spec.continuous_bounds[0];
        if !(lo..=hi).contains(&c2) {
            return Err(Error::InvalidArgument(format!("c2 = {c2} outside [{lo}, {hi}]")));
        }
        let n = grid.intervals.len();
        let binary = BinaryGrid {
            intervals: grid.intervals.clone(),
            values: grid.values.iter().map(|r| r.iter().map(|&v| (v > 0.5) as u8).collect()).collect(),
        };
        if binary.to_relaxed() != grid {
            log::warn!("grid holds fractional values; simulating them as given");
            let mut times: Vec<f64> = grid.intervals.iter().map(|iv| iv[0]).collect();
            times.push(grid.intervals[n - 1][1]);
            isto::model::ControlSchedule { times, discrete: grid.values.clone(), continuous: vec![vec![c2]; n] }
        } else {
            binary.to_schedule(vec![vec![c2]; n])?
        }
    } else {
        let traj = Trajectory::read_csv(&spec, text.as_bytes())?;
        isto::model::ControlSchedule { times: traj.times, discrete: traj.discrete, continuous: traj.continuous }
    };
    let traj = simulate(&spec, &schedule, &spec.x0)?;
    write_trajectory(&cfg.out_dir, SIMULATED_TRAJECTORY, &spec, &traj)?;
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub relaxed_cost: f64,
    pub relaxed_wall_time: f64,
    pub projected_cost: f64,
    pub projected_eta: f64,
    pub projected_max_tracking_error: f64,
    pub projection_wall_time: f64,
    pub isto_uptime: IstoSummary,
    pub isto_free: IstoSummary,
    /// relaxed < iSTO without uptime < iSTO with uptime < projected, each
    /// step by at least 1%.
    pub ordering_holds: bool,
    pub published: Published,
}

/// Numbers reported for the reference experiment, for side-by-side reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Published {
    pub relaxed_cost: f64,
    pub isto_free_cost: f64,
    pub isto_uptime_cost: f64,
    pub projected_cost_above: f64,
    pub relaxed_runtime: f64,
    pub projection_runtime: f64,
    pub isto_uptime_runtimes: Vec<f64>,
    pub isto_free_runtimes: Vec<f64>,
}

impl Default for Published {
    fn default() -> Self {
        Self {
            relaxed_cost: 18.239,
            isto_free_cost: 18.702,
            isto_uptime_cost: 19.406,
            projected_cost_above: 300.0,
            relaxed_runtime: 0.5,
            projection_runtime: 0.8,
            isto_uptime_runtimes: vec![0.53, 0.20, 0.11, 0.10, 0.26, 0.12],
            isto_free_runtimes: vec![0.54, 0.13, 0.11],
        }
    }
}

pub fn strictly_ordered(costs: &[f64], margin: f64) -> bool {
    costs.windows(2).all(|w| w[1] >= w[0] * (1.0 + margin))
}

/// Runs every route and writes `compare.json` plus a plot script.
pub fn compare(cfg: &RunConfig) -> Result<CompareReport> {
    let relaxed = relax(cfg)?;
    let rounded = round(cfg, None, None)?;
    let unbox = |f: Box<IstoFailure>| f.error;
    let isto_uptime = isto(cfg, cfg.min_uptime, "isto_uptime").map_err(unbox)?;
    let isto_free = isto(cfg, 0.0, "isto_free").map_err(unbox)?;
    let projected_cost = rounded.cia.simulated_cost.unwrap_or(f64::NAN);
    let report = CompareReport {
        relaxed_cost: relaxed.objective,
        relaxed_wall_time: relaxed.wall_time,
        projected_cost,
        projected_eta: rounded.cia.eta,
        projected_max_tracking_error: rounded.max_tracking_error,
        projection_wall_time: rounded.cia.wall_time,
        ordering_holds: strictly_ordered(&[relaxed.objective, isto_free.cost, isto_uptime.cost, projected_cost], 0.01),
        isto_uptime,
        isto_free,
        published: Published::default(),
    };
    write_json(&cfg.out_dir, COMPARE_REPORT, &report)?;
    let mut out = create(&cfg.out_dir, PLOT_FILE)?;
    out.write_all(PLOT_SCRIPT.as_bytes())?;
    out.flush()?;
    Ok(report)
}

/// Human-readable table of a comparison.
pub fn compare_table(r: &CompareReport) -> String {
    let p = &r.published;
    let fmt_times = |v: &[f64]| v.iter().map(|t| format!("{t:.2}")).collect::<Vec<_>>().join(", ");
    let mut s = String::new();
    s.push_str(&format!("{:<22}{:>12}{:>14}\n", "route", "cost", "published"));
    s.push_str(&format!("{:<22}{:>12.4}{:>14.3}\n", "relaxed", r.relaxed_cost, p.relaxed_cost));
    s.push_str(&format!("{:<22}{:>12.4}{:>14.3}\n", "iSTO, no uptime", r.isto_free.cost, p.isto_free_cost));
    s.push_str(&format!("{:<22}{:>12.4}{:>14.3}\n", "iSTO, uptime", r.isto_uptime.cost, p.isto_uptime_cost));
    s.push_str(&format!("{:<22}{:>12.4}{:>14}\n", "projected (CIA)", r.projected_cost, format!("> {}", p.projected_cost_above)));
    s.push_str(&format!("ordering relaxed < free < uptime < projected: {}\n", r.ordering_holds));
    s.push_str(&format!(
        "iSTO uptime: {} iterations, final {}; runtimes [{}] s (published [{}])\n",
        r.isto_uptime.iterations,
        r.isto_uptime.final_sequence,
        fmt_times(&r.isto_uptime.runtimes),
        fmt_times(&p.isto_uptime_runtimes)
    ));
    s.push_str(&format!(
        "iSTO free: {} iterations, final {}; runtimes [{}] s (published [{}])\n",
        r.isto_free.iterations,
        r.isto_free.final_sequence,
        fmt_times(&r.isto_free.runtimes),
        fmt_times(&p.isto_free_runtimes)
    ));
    s.push_str(&format!(
        "relaxed solve {:.2} s (published {}), projection {:.3} s (published {}), max |x2 - r| projected {:.3}\n",
        r.relaxed_wall_time, p.relaxed_runtime, r.projection_wall_time, p.projection_runtime, r.projected_max_tracking_error
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Infeasible("x".into())), 4);
        assert_eq!(exit_code(&Error::IterationCap { cap: 3 }), 3);
    }

    #[test]
    fn ordering_margin() {
        assert!(strictly_ordered(&[1.0, 1.02, 1.04], 0.01));
        assert!(!strictly_ordered(&[1.0, 1.005], 0.01));
        assert!(!strictly_ordered(&[2.0, 1.0], 0.01));
    }
}
