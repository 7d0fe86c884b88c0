//! Iterative sequence optimization around [`crate::sto`].
//!
//! Starting from a sequence rich enough to contain the optimal one, the
//! driver repeatedly solves the STO problem and removes stages whose
//! duration collapsed to zero. Stage lower bounds are softened by slacks;
//! a stage that needs slack is a candidate for removal, and its penalty
//! weights are alternated between the slack term (`a`, pushing the stage
//! to honor its bound) and the duration term (`b`, pushing it to zero)
//! with growing magnitude each time it is picked again. The run ends once
//! no stage needs slack and no stage has zero length.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::nlp::SolverOptions;
use crate::sto::{default_nodes_per_stage, solve_sto, Sequence, StageCost, StoSetup, StoSolution};

/// Durations below this (seconds) count as zero.
pub const EPS_W: f64 = 1e-6;
/// Slacks above this (seconds) count as active.
pub const EPS_E: f64 = 1e-6;

/// Penalty weights by repetition count: `base^k` in the slack slot for
/// even `k`, in the duration slot for odd `k`, up to `cap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSchedule {
    pub base: f64,
    pub cap: f64,
}

impl Default for CostSchedule {
    fn default() -> Self {
        Self { base: 10.0, cap: 1e8 }
    }
}

impl CostSchedule {
    /// Weights for repetition `k`, or `None` past the cap.
    pub fn entry(&self, k: usize) -> Option<StageCost> {
        let v = self.base.powi(k as i32);
        if !v.is_finite() || v > self.cap {
            return None;
        }
        Some(if k % 2 == 0 { StageCost { a: v, b: 0.0 } } else { StageCost { a: 0.0, b: v } })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 1.0 && self.cap >= 1.0 && self.base.is_finite()) {
            return Err(Error::InvalidArgument(format!("cost schedule {self:?} must have base > 1 and cap >= 1")));
        }
        Ok(())
    }
}

/// Bumps stage `r`'s repetition counter and returns its new weights.
/// Running past the schedule means the stage can neither meet its bound
/// nor be driven to zero, which is reported as infeasibility.
pub fn alternate_costs(counters: &mut [usize], r: usize, schedule: &CostSchedule) -> Result<StageCost> {
    let k = counters
        .get(r)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("stage {r} out of range")))?
        + 1;
    let cost = schedule
        .entry(k)
        .ok_or_else(|| Error::Infeasible(format!("stage {r} exhausted the cost schedule after {} alternations", k - 1)))?;
    counters[r] = k;
    Ok(cost)
}

/// Stage with the largest slack above [`EPS_E`]; the lowest index wins ties.
pub fn select_candidate(sol: &StoSolution) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &e) in sol.slacks.iter().enumerate() {
        if e > EPS_E && best.is_none_or(|b| e > sol.slacks[b]) {
            best = Some(i);
        }
    }
    best
}

/// Drops stages shorter than [`EPS_W`]; returns the surviving sequence and
/// the removed positions.
pub fn remove_zero_stages(sol: &StoSolution, seq: &Sequence) -> Result<(Sequence, Vec<usize>)> {
    if sol.durations.stages() != seq.len() {
        return Err(Error::InvalidArgument(format!(
            "{} durations for {} stages",
            sol.durations.stages(),
            seq.len()
        )));
    }
    let (keep, removed): (Vec<usize>, Vec<usize>) = (0..seq.len()).partition(|&i| sol.durations.w[i] >= EPS_W);
    if keep.is_empty() {
        return Err(Error::Malformed("every stage has zero duration".into()));
    }
    Ok((seq.select(&keep), removed))
}

/// Forbidden direct transitions between stage values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceFilter {
    pub forbidden: Vec<(Vec<f64>, Vec<f64>)>,
}

impl SequenceFilter {
    pub fn allows_transition(&self, from: &[f64], to: &[f64]) -> bool {
        !self.forbidden.iter().any(|(a, b)| a == from && b == to)
    }

    pub fn allows(&self, seq: &Sequence) -> bool {
        seq.stages.windows(2).all(|p| self.allows_transition(&p[0], &p[1]))
    }
}

/// Cycles through `values` until `length` stages are placed, skipping
/// values the filter forbids after the previous stage.
pub fn enumerate_initial_sequence(values: &[Vec<f64>], length: usize, filter: Option<&SequenceFilter>) -> Result<Sequence> {
    if length == 0 || values.is_empty() {
        return Err(Error::InvalidArgument("need a positive length and a non-empty value set".into()));
    }
    let mut stages: Vec<Vec<f64>> = Vec::with_capacity(length);
    let mut next = 0;
    while stages.len() < length {
        let pick = (0..values.len()).map(|o| (next + o) % values.len()).find(|&i| match (filter, stages.last()) {
            (Some(f), Some(prev)) => f.allows_transition(prev, &values[i]),
            _ => true,
        });
        let i = pick.ok_or_else(|| Error::InvalidArgument("the filter rejects every continuation".into()))?;
        stages.push(values[i].clone());
        next = i + 1;
    }
    Ok(Sequence::new(stages))
}

/// Order in which the Double Tank default cycles through its inputs.
pub const DOUBLE_TANK_CYCLE: [[f64; 2]; 4] = [[1.0, 1.0], [0.0, 1.0], [1.0, 0.0], [0.0, 0.0]];

/// The seven-stage Double Tank starting sequence.
pub fn double_tank_initial_sequence() -> Sequence {
    let values: Vec<Vec<f64>> = DOUBLE_TANK_CYCLE.iter().map(|v| v.to_vec()).collect();
    enumerate_initial_sequence(&values, 7, None).expect("fixed non-empty input")
}

/// Minimum-uptime bounds: every stage must last at least `min_uptime`.
pub fn uptime_bounds(seq: &Sequence, min_uptime: f64) -> Vec<f64> {
    vec![min_uptime; seq.len()]
}

#[derive(Debug, Clone)]
pub struct IstoOptions {
    /// Intervals per stage. By default each solve spreads about
    /// [`crate::sto::TARGET_INTERVALS`] over the current sequence, so the
    /// resolution grows as stages are removed.
    pub nodes_per_stage: Option<usize>,
    pub schedule: CostSchedule,
    pub solver: SolverOptions,
    pub filter: Option<SequenceFilter>,
    /// STO solves allowed before giving up; defaults to ten per initial
    /// stage.
    pub max_iterations: Option<usize>,
}

impl Default for IstoOptions {
    fn default() -> Self {
        Self {
            nodes_per_stage: None,
            schedule: CostSchedule::default(),
            solver: SolverOptions::default(),
            filter: None,
            max_iterations: None,
        }
    }
}

/// One STO solve of the driver. Stage references use positions in the
/// initial sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sequence_before: Vec<Vec<f64>>,
    pub sequence_after: Vec<Vec<f64>>,
    /// Initial-sequence position of every stage in `sequence_before`.
    pub stages: Vec<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub repetitions: Vec<usize>,
    pub w: Vec<f64>,
    pub e: Vec<f64>,
    /// Multipliers of the softened bounds, for inspection only.
    pub timing_multipliers: Vec<f64>,
    pub removed: Vec<usize>,
    /// Stage picked from this solve's slacks, with its new weights.
    pub candidate: Option<usize>,
    pub candidate_cost: Option<StageCost>,
    pub cost: f64,
    pub penalized_cost: f64,
    pub solver_iterations: usize,
    pub wall_time: f64,
}

impl IterationRecord {
    /// `iter=k cost=... removed=[...] candidate=r a=... b=...`
    pub fn summary_line(&self) -> String {
        let removed: Vec<String> = self.removed.iter().map(usize::to_string).collect();
        let (cand, a, b) = match (self.candidate, self.candidate_cost) {
            (Some(r), Some(c)) => (r.to_string(), format!("{:e}", c.a), format!("{:e}", c.b)),
            _ => ("-".into(), "-".into(), "-".into()),
        };
        format!(
            "iter={} cost={:.6} removed=[{}] candidate={cand} a={a} b={b}",
            self.iteration,
            self.cost,
            removed.join(",")
        )
    }
}

pub fn write_log_json<W: Write>(records: &[IterationRecord], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, records)?;
    Ok(())
}

pub fn read_log_json<R: Read>(input: R) -> Result<Vec<IterationRecord>> {
    Ok(serde_json::from_reader(input)?)
}

#[derive(Debug, Clone)]
pub struct IstoOutcome {
    pub solution: StoSolution,
    pub records: Vec<IterationRecord>,
}

/// A failed run with the iterations completed before the failure.
#[derive(Debug)]
pub struct IstoFailure {
    pub error: Error,
    pub records: Vec<IterationRecord>,
}

impl std::fmt::Display for IstoFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.records.len())
    }
}

impl std::error::Error for IstoFailure {}

/// Current sequence with per-stage bookkeeping.
struct Pool {
    seq: Sequence,
    origin: Vec<usize>,
    bounds: Vec<f64>,
    costs: Vec<StageCost>,
    counters: Vec<usize>,
}

impl Pool {
    fn retain(&mut self, keep: &[usize]) {
        self.seq = self.seq.select(keep);
        self.origin = keep.iter().map(|&i| self.origin[i]).collect();
        self.bounds = keep.iter().map(|&i| self.bounds[i]).collect();
        self.costs = keep.iter().map(|&i| self.costs[i]).collect();
        self.counters = keep.iter().map(|&i| self.counters[i]).collect();
    }
}

/// Runs the iterative STO from `initial` with per-stage lower bounds
/// `timing` (zero for none).
pub fn run_isto(
    spec: &ProblemSpec,
    initial: &Sequence,
    timing: &[f64],
    opts: &IstoOptions,
) -> std::result::Result<IstoOutcome, Box<IstoFailure>> {
    let mut records = Vec::new();
    match drive(spec, initial, timing, opts, &mut records) {
        Ok(solution) => Ok(IstoOutcome { solution, records }),
        Err(error) => Err(Box::new(IstoFailure { error, records })),
    }
}

fn drive(
    spec: &ProblemSpec,
    initial: &Sequence,
    timing: &[f64],
    opts: &IstoOptions,
    records: &mut Vec<IterationRecord>,
) -> Result<StoSolution> {
    initial.validate(spec)?;
    opts.schedule.validate()?;
    if timing.len() != initial.len() {
        return Err(Error::InvalidArgument(format!("{} bounds for {} stages", timing.len(), initial.len())));
    }
    if let Some(f) = &opts.filter {
        if !f.allows(initial) {
            return Err(Error::InvalidArgument("initial sequence violates the sequence filter".into()));
        }
    }
    let first = opts.schedule.entry(0).expect("schedule starts below its cap");
    let cap = opts.max_iterations.unwrap_or(10 * initial.len());
    let mut pool = Pool {
        seq: initial.clone(),
        origin: (0..initial.len()).collect(),
        bounds: timing.to_vec(),
        costs: vec![first; initial.len()],
        counters: vec![0; initial.len()],
    };
    let mut warm = None;

    let solve = |pool: &Pool, warm: &Option<crate::sto::StoWarmStart>, records: &mut Vec<IterationRecord>| {
        if records.len() >= cap {
            return Err(Error::IterationCap { cap });
        }
        let m = opts.nodes_per_stage.unwrap_or_else(|| default_nodes_per_stage(pool.seq.len()));
        let setup = StoSetup { nodes_per_stage: m, lower_bounds: pool.bounds.clone(), costs: pool.costs.clone() };
        let clock = Instant::now();
        let sol = solve_sto(spec, &pool.seq, &setup, &opts.solver, warm.as_ref())?;
        records.push(IterationRecord {
            iteration: records.len() + 1,
            sequence_before: pool.seq.stages.clone(),
            sequence_after: pool.seq.stages.clone(),
            stages: pool.origin.clone(),
            a: pool.costs.iter().map(|c| c.a).collect(),
            b: pool.costs.iter().map(|c| c.b).collect(),
            repetitions: pool.counters.clone(),
            w: sol.durations.w.clone(),
            e: sol.slacks.clone(),
            timing_multipliers: sol.timing_multipliers.clone(),
            removed: Vec::new(),
            candidate: None,
            candidate_cost: None,
            cost: sol.cost,
            penalized_cost: sol.penalized_cost,
            solver_iterations: sol.nlp.iterations,
            wall_time: clock.elapsed().as_secs_f64(),
        });
        Ok(sol)
    };

    // a solve whose sequence and weights match the previous one would
    // return that solution unchanged, so it is reused rather than repeated
    let mut carried: Option<StoSolution> = None;
    loop {
        let mut sol = match carried.take() {
            Some(sol) => {
                log::debug!("sequence and weights unchanged, reusing the last solve");
                sol
            }
            None => solve(&pool, &warm, records)?,
        };
        if let Some(r) = select_candidate(&sol) {
            let cost = alternate_costs(&mut pool.counters, r, &opts.schedule)?;
            pool.costs[r] = cost;
            let rec = records.last_mut().expect("just pushed");
            rec.candidate = Some(pool.origin[r]);
            rec.candidate_cost = Some(cost);
            log::info!("{}", rec.summary_line());
            let all: Vec<usize> = (0..pool.seq.len()).collect();
            sol = solve(&pool, &Some(sol.warm_start(&all)?), records)?;
        } else if sol.durations.w.iter().all(|&w| w >= EPS_W) {
            log::info!("{}", records.last().expect("just pushed").summary_line());
            check_clean(&sol)?;
            return Ok(sol);
        }
        let (_, removed) = remove_zero_stages(&sol, &pool.seq)?;
        if removed.is_empty() {
            carried = Some(sol);
            continue;
        }
        let keep: Vec<usize> = (0..pool.seq.len()).filter(|i| !removed.contains(i)).collect();
        let rec = records.last_mut().expect("just pushed");
        rec.removed = removed.iter().map(|&i| pool.origin[i]).collect();
        warm = Some(sol.warm_start(&keep)?);
        pool.retain(&keep);
        rec.sequence_after = pool.seq.stages.clone();
        log::info!("{}", rec.summary_line());
        if let Some(f) = &opts.filter {
            if !f.allows(&pool.seq) {
                log::warn!("stage removal produced a transition the sequence filter forbids");
            }
        }
    }
}

fn check_clean(sol: &StoSolution) -> Result<()> {
    let bad = sol
        .durations
        .w
        .iter()
        .zip(&sol.lower_bounds)
        .position(|(w, lb)| *w < lb - EPS_E);
    match bad {
        Some(i) => Err(Error::Malformed(format!("stage {i} ends below its lower bound"))),
        None => Ok(()),
    }
}
