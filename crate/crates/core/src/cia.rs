//! Combinatorial integral approximation: projection of a relaxed control
//! grid onto binary controls.
//!
//! The deviation of a binary grid from a relaxed one is
//!
//! ```text
//!   eta = max_i max_k | sum_{j<=k} (rel_ij - bin_ij) dt_j |
//! ```
//!
//! [`sum_up_rounding`] is the greedy baseline. [`solve_cia`] minimizes eta
//! exactly under minimum up/down time constraints by branch and bound.
//!
//! Controls do not interact in eta or in the dwell constraints, so each
//! control is searched on its own: a best-first search finds the control's
//! optimal deviation, the joint optimum is the largest of these, and a
//! depth-first pass (0 before 1) then picks for every control the
//! lexicographically smallest word within the joint optimum. The tuple of
//! per-control minima is the lexicographic minimum of the joint word in
//! time-major, control-minor order.
//!
//! Interval lengths enter the binary part of the accumulator as integer
//! multiples of [`QUANTUM`] so that search states with equal on-time
//! compare equal regardless of the order the intervals were switched on.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{fmt_f64, ControlSchedule};

/// Resolution (seconds) of accumulated on-time: 2^-40.
pub const QUANTUM: f64 = 1.0 / (1u64 << 40) as f64;

/// Deviations within this of the optimum count as ties.
pub const TIE_TOL: f64 = 1e-9;

/// Slack (seconds) allowed on dwell-time lower bounds.
pub const DWELL_TOL: f64 = 1e-9;

pub const DEFAULT_NODE_LIMIT: u64 = 10_000_000;

/// Longest horizon the quantized accumulator can represent.
const MAX_HORIZON: f64 = 1e6;

/// Relaxed control values per interval (`values[k][i]` for control `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedGrid {
    pub intervals: Vec<[f64; 2]>,
    pub values: Vec<Vec<f64>>,
}

/// Binary control values per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryGrid {
    pub intervals: Vec<[f64; 2]>,
    pub values: Vec<Vec<u8>>,
}

fn check_intervals(intervals: &[[f64; 2]]) -> Result<()> {
    for (k, iv) in intervals.iter().enumerate() {
        if !(iv[0].is_finite() && iv[1].is_finite() && iv[1] > iv[0]) {
            return Err(Error::InvalidArgument(format!("interval {k} is empty or not finite")));
        }
        if k > 0 && (iv[0] - intervals[k - 1][1]).abs() > 1e-9 * (1.0 + iv[0].abs()) {
            return Err(Error::InvalidArgument(format!("interval {k} does not start where {} ends", k - 1)));
        }
    }
    if let (Some(a), Some(b)) = (intervals.first(), intervals.last()) {
        if b[1] - a[0] > MAX_HORIZON {
            return Err(Error::InvalidArgument(format!("horizon longer than {MAX_HORIZON} s")));
        }
    }
    Ok(())
}

fn check_width<T>(values: &[Vec<T>], intervals: usize) -> Result<usize> {
    if values.len() != intervals {
        return Err(Error::InvalidArgument(format!(
            "{} value rows for {intervals} intervals",
            values.len()
        )));
    }
    let width = values.first().map_or(0, Vec::len);
    if let Some(k) = values.iter().position(|v| v.len() != width) {
        return Err(Error::InvalidArgument(format!("row {k} has {} controls, expected {width}", values[k].len())));
    }
    Ok(width)
}

impl RelaxedGrid {
    pub fn controls(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Checks contiguity and that every value lies in `[0, 1]` (with a
    /// small tolerance for solver output).
    pub fn validate(&self) -> Result<()> {
        check_intervals(&self.intervals)?;
        check_width(&self.values, self.intervals.len())?;
        for (k, row) in self.values.iter().enumerate() {
            if let Some(v) = row.iter().find(|v| !(-1e-6..=1.0 + 1e-6).contains(*v)) {
                return Err(Error::InvalidArgument(format!("relaxed value {v} outside [0, 1] on interval {k}")));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, labels: &[String], out: W) -> Result<()> {
        write_grid(&self.intervals, labels, self.values.iter().map(|r| r.iter().map(|v| fmt_f64(*v)).collect()), out)
    }

    /// Reads a grid written by [`Self::write_csv`]; returns the control labels.
    pub fn read_csv<R: Read>(input: R) -> Result<(Self, Vec<String>)> {
        let (intervals, labels, rows) = read_grid(input)?;
        let values = rows
            .into_iter()
            .map(|r| {
                r.iter()
                    .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Malformed(format!("value {s:?}: {e}"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let grid = Self { intervals, values };
        grid.validate()?;
        Ok((grid, labels))
    }
}

impl BinaryGrid {
    pub fn controls(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        check_intervals(&self.intervals)?;
        check_width(&self.values, self.intervals.len())?;
        if self.values.iter().flatten().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("binary grid holds a value other than 0 or 1".into()));
        }
        Ok(())
    }

    /// The grid as relaxed values.
    pub fn to_relaxed(&self) -> RelaxedGrid {
        RelaxedGrid {
            intervals: self.intervals.clone(),
            values: self.values.iter().map(|r| r.iter().map(|&b| b as f64).collect()).collect(),
        }
    }

    /// Control schedule for [`crate::model::simulate`] with the given
    /// continuous inputs per interval.
    pub fn to_schedule(&self, continuous: Vec<Vec<f64>>) -> Result<ControlSchedule> {
        if continuous.len() != self.intervals.len() {
            return Err(Error::InvalidArgument(format!(
                "{} continuous rows for {} intervals",
                continuous.len(),
                self.intervals.len()
            )));
        }
        let mut times: Vec<f64> = self.intervals.iter().map(|iv| iv[0]).collect();
        times.extend(self.intervals.last().map(|iv| iv[1]));
        Ok(ControlSchedule {
            times,
            discrete: self.to_relaxed().values,
            continuous,
        })
    }

    pub fn write_csv<W: Write>(&self, labels: &[String], out: W) -> Result<()> {
        write_grid(&self.intervals, labels, self.values.iter().map(|r| r.iter().map(|b| b.to_string()).collect()), out)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<(Self, Vec<String>)> {
        let (intervals, labels, rows) = read_grid(input)?;
        let values = rows
            .into_iter()
            .map(|r| {
                r.iter()
                    .map(|s| match s.trim() {
                        "0" => Ok(0),
                        "1" => Ok(1),
                        other => Err(Error::Malformed(format!("binary value {other:?}"))),
                    })
                    .collect::<Result<Vec<u8>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let grid = Self { intervals, values };
        grid.validate()?;
        Ok((grid, labels))
    }
}

fn write_grid<W: Write>(
    intervals: &[[f64; 2]],
    labels: &[String],
    rows: impl Iterator<Item = Vec<String>>,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t_left".to_string(), "t_right".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (iv, vals) in intervals.iter().zip(rows) {
        if vals.len() != labels.len() {
            return Err(Error::InvalidArgument(format!("{} labels for {} controls", labels.len(), vals.len())));
        }
        let mut row = vec![fmt_f64(iv[0]), fmt_f64(iv[1])];
        row.extend(vals);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

type GridRows = (Vec<[f64; 2]>, Vec<String>, Vec<Vec<String>>);

fn read_grid<R: Read>(input: R) -> Result<GridRows> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 || header[0] != "t_left" || header[1] != "t_right" {
        return Err(Error::Malformed("grid CSV must start with t_left,t_right".into()));
    }
    let labels = header[2..].to_vec();
    let mut intervals = Vec::new();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.trim().parse().map_err(|e| Error::Malformed(format!("time {s:?}: {e}")))
        };
        intervals.push([num(0)?, num(1)?]);
        rows.push(rec.iter().skip(2).map(str::to_string).collect());
    }
    Ok((intervals, labels, rows))
}

/// Lower bounds on the length of runs of equal values, per control.
/// Runs touching the end of the horizon are exempt, and every control is
/// off before the first interval with no pending obligation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DwellConstraints {
    pub min_uptime: f64,
    pub min_downtime: f64,
}

impl DwellConstraints {
    pub fn min_uptime(t: f64) -> Self {
        Self { min_uptime: t, min_downtime: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("min_uptime", self.min_uptime), ("min_downtime", self.min_downtime)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationBound {
    pub eta: f64,
    pub per_control: Vec<f64>,
}

/// Quantized interval lengths and relaxed prefix integrals of one control.
struct Accumulator {
    /// `rel[k]`: integral of the relaxed control over the first `k` intervals.
    rel: Vec<f64>,
    /// Interval lengths in units of [`QUANTUM`].
    len: Vec<i64>,
}

impl Accumulator {
    fn new(intervals: &[[f64; 2]], values: impl Iterator<Item = f64>) -> Self {
        let mut rel = vec![0.0];
        let mut len = Vec::with_capacity(intervals.len());
        for (iv, v) in intervals.iter().zip(values) {
            let dt = iv[1] - iv[0];
            rel.push(rel[rel.len() - 1] + v * dt);
            len.push(quantize(dt));
        }
        Self { rel, len }
    }

    /// Deviation after `k` intervals with `on` quanta of binary on-time.
    #[inline]
    fn deviation(&self, k: usize, on: i64) -> f64 {
        self.rel[k] - on as f64 * QUANTUM
    }
}

fn quantize(t: f64) -> i64 {
    (t / QUANTUM).round() as i64
}

fn check_pair(rel: &RelaxedGrid, bin: &BinaryGrid) -> Result<()> {
    rel.validate()?;
    bin.validate()?;
    let same = rel.intervals.len() == bin.intervals.len()
        && rel.controls() == bin.controls()
        && rel
            .intervals
            .iter()
            .zip(&bin.intervals)
            .all(|(a, b)| (a[0] - b[0]).abs() <= 1e-9 && (a[1] - b[1]).abs() <= 1e-9);
    if same {
        Ok(())
    } else {
        Err(Error::InvalidArgument("relaxed and binary grids do not match".into()))
    }
}

/// Maximum accumulated deviation of `bin` from `rel`.
pub fn evaluate_eta(rel: &RelaxedGrid, bin: &BinaryGrid) -> Result<DeviationBound> {
    check_pair(rel, bin)?;
    let per_control: Vec<f64> = (0..rel.controls())
        .map(|i| {
            let mut acc = 0.0_f64;
            let mut eta = 0.0_f64;
            for (k, iv) in rel.intervals.iter().enumerate() {
                acc += (rel.values[k][i] - bin.values[k][i] as f64) * (iv[1] - iv[0]);
                eta = eta.max(acc.abs());
            }
            eta
        })
        .collect();
    Ok(DeviationBound { eta: per_control.iter().copied().fold(0.0, f64::max), per_control })
}

/// Sum-up rounding: per control, switch on whenever the accumulated
/// relaxed-minus-binary integral reaches half the interval length.
pub fn sum_up_rounding(grid: &RelaxedGrid) -> Result<BinaryGrid> {
    grid.validate()?;
    let n = grid.intervals.len();
    let mut values = vec![vec![0u8; grid.controls()]; n];
    for i in 0..grid.controls() {
        let mut gamma = 0.0;
        for k in 0..n {
            let dt = grid.intervals[k][1] - grid.intervals[k][0];
            gamma += grid.values[k][i] * dt;
            let b = gamma >= 0.5 * dt;
            values[k][i] = b as u8;
            if b {
                gamma -= dt;
            }
        }
    }
    Ok(BinaryGrid { intervals: grid.intervals.clone(), values })
}

/// A maximal run that is shorter than its required dwell time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwellViolation {
    pub control: usize,
    pub value: u8,
    pub first_interval: usize,
    pub last_interval: usize,
    pub duration: f64,
    pub required: f64,
}

/// Scans every maximal run of each control and reports those shorter than
/// required. Runs ending at the last interval are exempt, as is an off run
/// starting at the first interval.
pub fn dwell_violations(bin: &BinaryGrid, c: &DwellConstraints) -> Vec<DwellViolation> {
    let n = bin.intervals.len();
    let mut out = Vec::new();
    for i in 0..bin.controls() {
        let mut start = 0;
        while start < n {
            let value = bin.values[start][i];
            let mut end = start;
            while end + 1 < n && bin.values[end + 1][i] == value {
                end += 1;
            }
            let required = if value == 1 { c.min_uptime } else { c.min_downtime };
            let exempt = end == n - 1 || (value == 0 && start == 0);
            let duration = bin.intervals[end][1] - bin.intervals[start][0];
            if !exempt && duration < required - DWELL_TOL {
                out.push(DwellViolation { control: i, value, first_interval: start, last_interval: end, duration, required });
            }
            start = end + 1;
        }
    }
    out
}

pub fn is_dwell_feasible(bin: &BinaryGrid, c: &DwellConstraints) -> bool {
    dwell_violations(bin, c).is_empty()
}

#[derive(Debug, Clone)]
pub struct CiaOptions {
    pub constraints: DwellConstraints,
    /// Budget of expanded search nodes over all controls.
    pub node_limit: u64,
    pub execution: Execution,
}

impl Default for CiaOptions {
    fn default() -> Self {
        Self {
            constraints: DwellConstraints::default(),
            node_limit: DEFAULT_NODE_LIMIT,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CiaSolution {
    pub grid: BinaryGrid,
    pub bound: DeviationBound,
    pub nodes_expanded: u64,
    /// False when the node budget ran out and the best known grid was
    /// returned instead.
    pub optimal: bool,
}

/// Summary written next to the projected grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiaReport {
    pub eta: f64,
    pub eta_per_control: Vec<f64>,
    pub nodes_expanded: u64,
    pub optimal: bool,
    pub min_uptime: f64,
    pub min_downtime: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulated_cost: Option<f64>,
    pub wall_time: f64,
}

impl CiaReport {
    pub fn new(sol: &CiaSolution, constraints: &DwellConstraints, wall_time: f64) -> Self {
        Self {
            eta: sol.bound.eta,
            eta_per_control: sol.bound.per_control.clone(),
            nodes_expanded: sol.nodes_expanded,
            optimal: sol.optimal,
            min_uptime: constraints.min_uptime,
            min_downtime: constraints.min_downtime,
            simulated_cost: None,
            wall_time,
        }
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        Ok(serde_json::from_reader(input)?)
    }
}

/// Minimum-deviation projection under a minimum uptime.
pub fn solve_cia_bnb(grid: &RelaxedGrid, min_uptime: f64) -> Result<CiaSolution> {
    solve_cia(grid, &CiaOptions { constraints: DwellConstraints::min_uptime(min_uptime), ..CiaOptions::default() })
}

pub fn solve_cia(grid: &RelaxedGrid, opts: &CiaOptions) -> Result<CiaSolution> {
    grid.validate()?;
    opts.constraints.validate()?;
    let nc = grid.controls();
    let n = grid.intervals.len();
    let need = [quantize(opts.constraints.min_downtime), quantize(opts.constraints.min_uptime)];
    let slack = quantize(DWELL_TOL);
    let per_control_limit = opts.node_limit / nc.max(1) as u64;

    let searches: Vec<ControlSearch> = (0..nc)
        .map(|i| ControlSearch {
            acc: Accumulator::new(&grid.intervals, grid.values.iter().map(|r| r[i].clamp(0.0, 1.0))),
            need,
            slack,
        })
        .collect();

    let phase1 = opts.execution.map_indexed(nc, |i| searches[i].optimal_deviation(per_control_limit));
    let joint = phase1.iter().map(|r| r.eta).fold(0.0, f64::max);
    let bound = joint + TIE_TOL;
    let phase2 = opts.execution.map_indexed(nc, |i| {
        if phase1[i].complete {
            searches[i].smallest_word(bound, per_control_limit)
        } else {
            (None, 0)
        }
    });

    let mut values = vec![vec![0u8; nc]; n];
    let mut nodes = 0;
    let mut optimal = true;
    for i in 0..nc {
        nodes += phase1[i].nodes + phase2[i].1;
        let word = match &phase2[i].0 {
            Some(w) => w,
            None => {
                optimal = false;
                &phase1[i].incumbent
            }
        };
        for k in 0..n {
            values[k][i] = word[k];
        }
    }
    let grid_out = BinaryGrid { intervals: grid.intervals.clone(), values };
    let bound = evaluate_eta(grid, &grid_out)?;
    Ok(CiaSolution { grid: grid_out, bound, nodes_expanded: nodes, optimal })
}

struct ControlSearch {
    acc: Accumulator,
    /// Required run length (quanta) for value 0 and value 1.
    need: [i64; 2],
    slack: i64,
}

/// Search state after deciding the first `k` intervals of one control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct State {
    k: u32,
    value: u8,
    /// Length of the current run, capped at its requirement.
    run: i64,
    /// Accumulated on-time.
    on: i64,
}

struct Phase1 {
    eta: f64,
    complete: bool,
    nodes: u64,
    incumbent: Vec<u8>,
}

/// Best-first queue entry, ordered so the heap pops the smallest bound,
/// then the deepest state.
struct Entry {
    lb: f64,
    state: State,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (&self.state, &other.state);
        other
            .lb
            .total_cmp(&self.lb)
            .then(a.k.cmp(&b.k))
            .then(b.value.cmp(&a.value))
            .then(b.run.cmp(&a.run))
            .then(b.on.cmp(&a.on))
    }
}

impl ControlSearch {
    fn intervals(&self) -> usize {
        self.acc.len.len()
    }

    fn start(&self) -> State {
        // off before the horizon with no pending obligation
        State { k: 0, value: 0, run: self.need[0], on: 0 }
    }

    /// Successor after setting the next interval to `bit`, if the dwell
    /// rules allow it, with its deviation.
    #[inline]
    fn child(&self, s: &State, bit: u8) -> Option<(State, f64)> {
        let k = s.k as usize;
        let len = self.acc.len[k];
        let run = if bit == s.value {
            (s.run + len).min(self.need[bit as usize])
        } else {
            if s.run + self.slack < self.need[s.value as usize] {
                return None;
            }
            len.min(self.need[bit as usize])
        };
        let on = s.on + bit as i64 * len;
        let next = State { k: s.k + 1, value: bit, run, on };
        Some((next, self.acc.deviation(k + 1, on).abs()))
    }

    /// Sum-up rounding that keeps the current value whenever switching is
    /// not yet allowed. Always dwell feasible.
    fn greedy(&self) -> (Vec<u8>, f64) {
        let mut s = self.start();
        let mut word = Vec::with_capacity(self.intervals());
        let mut eta = 0.0_f64;
        for k in 0..self.intervals() {
            let half = self.acc.len[k] / 2;
            let gamma = self.acc.rel[k + 1] - s.on as f64 * QUANTUM;
            let want = (gamma >= half as f64 * QUANTUM) as u8;
            let (next, dev) = self.child(&s, want).or_else(|| self.child(&s, s.value)).expect("staying is always allowed");
            word.push(next.value);
            eta = eta.max(dev);
            s = next;
        }
        (word, eta)
    }

    fn optimal_deviation(&self, limit: u64) -> Phase1 {
        let n = self.intervals();
        let (incumbent, upper) = self.greedy();
        let mut heap = BinaryHeap::new();
        let mut closed = HashSet::new();
        heap.push(Entry { lb: 0.0, state: self.start() });
        let mut nodes = 0;
        while let Some(Entry { lb, state }) = heap.pop() {
            if state.k as usize == n {
                return Phase1 { eta: lb, complete: true, nodes, incumbent };
            }
            if !closed.insert(state) {
                continue;
            }
            nodes += 1;
            if nodes > limit {
                break;
            }
            for bit in 0..2 {
                if let Some((next, dev)) = self.child(&state, bit) {
                    let lb = lb.max(dev);
                    if lb <= upper && !closed.contains(&next) {
                        heap.push(Entry { lb, state: next });
                    }
                }
            }
        }
        Phase1 { eta: upper, complete: false, nodes, incumbent }
    }

    /// Lexicographically smallest word whose deviation never exceeds
    /// `bound`, by depth-first search with memoized dead states.
    fn smallest_word(&self, bound: f64, limit: u64) -> (Option<Vec<u8>>, u64) {
        let n = self.intervals();
        let mut dead = HashSet::new();
        // (state, next bit to try)
        let mut stack = vec![(self.start(), 0u8)];
        let mut nodes = 0;
        while let Some((state, bit)) = stack.last().copied() {
            if state.k as usize == n {
                let word = stack[1..].iter().map(|(s, _)| s.value).collect();
                return (Some(word), nodes);
            }
            if bit > 1 {
                dead.insert(state);
                stack.pop();
                continue;
            }
            stack.last_mut().unwrap().1 = bit + 1;
            if let Some((next, dev)) = self.child(&state, bit) {
                if dev <= bound && !dead.contains(&next) {
                    nodes += 1;
                    if nodes > limit {
                        return (None, nodes);
                    }
                    stack.push((next, 0));
                }
            }
        }
        (None, nodes)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn uniform(values: Vec<Vec<f64>>, dt: f64) -> RelaxedGrid {
        let intervals = (0..values.len()).map(|k| [k as f64 * dt, (k + 1) as f64 * dt]).collect();
        RelaxedGrid { intervals, values }
    }

    /// Deviation computed directly from the definition in plain floats.
    fn naive_eta(rel: &RelaxedGrid, word: &[Vec<u8>]) -> f64 {
        let mut eta = 0.0_f64;
        for i in 0..rel.controls() {
            let mut acc = 0.0;
            for (k, iv) in rel.intervals.iter().enumerate() {
                acc += (rel.values[k][i] - word[k][i] as f64) * (iv[1] - iv[0]);
                eta = eta.max(acc.abs());
            }
        }
        eta
    }

    /// Run-length check written from scratch: every maximal run of ones
    /// not reaching the end must last at least `up`.
    fn naive_feasible(rel: &RelaxedGrid, word: &[Vec<u8>], up: f64) -> bool {
        let n = word.len();
        (0..rel.controls()).all(|i| {
            let mut k = 0;
            while k < n {
                if word[k][i] == 1 {
                    let s = k;
                    while k < n && word[k][i] == 1 {
                        k += 1;
                    }
                    if k < n && rel.intervals[k - 1][1] - rel.intervals[s][0] < up - 1e-9 {
                        return false;
                    }
                } else {
                    k += 1;
                }
            }
            true
        })
    }

    /// Exhaustive optimum: smallest eta, ties to the lexicographically
    /// smallest time-major word.
    fn brute_force(rel: &RelaxedGrid, up: f64) -> (f64, Vec<Vec<u8>>) {
        let (n, nc) = (rel.intervals.len(), rel.controls());
        let bits = n * nc;
        let words: Vec<(f64, Vec<Vec<u8>>)> = (0u32..1 << bits)
            .map(|code| {
                // most significant bit first = time-major, control-minor order
                let word: Vec<Vec<u8>> = (0..n)
                    .map(|k| (0..nc).map(|i| ((code >> (bits - 1 - (k * nc + i))) & 1) as u8).collect())
                    .collect();
                (naive_eta(rel, &word), word)
            })
            .filter(|(_, w)| naive_feasible(rel, w, up))
            .collect();
        let best = words.iter().map(|w| w.0).fold(f64::INFINITY, f64::min);
        // codes ascend in lexicographic order, so the first tie wins
        let winner = words.into_iter().find(|w| w.0 <= best + TIE_TOL).unwrap();
        (best, winner.1)
    }

    #[test]
    fn sur_examples() {
        let ones = uniform(vec![vec![1.0]; 5], 1.0);
        assert_eq!(sum_up_rounding(&ones).unwrap().values, vec![vec![1]; 5]);
        let half = uniform(vec![vec![0.5]; 4], 1.0);
        let sur = sum_up_rounding(&half).unwrap();
        assert_eq!(sur.values, vec![vec![1], vec![0], vec![1], vec![0]]);
        assert_abs_diff_eq!(evaluate_eta(&half, &sur).unwrap().eta, 0.5);
        let zeros = uniform(vec![vec![0.0]; 3], 1.0);
        let sur = sum_up_rounding(&zeros).unwrap();
        assert_eq!(sur.values, vec![vec![0]; 3]);
        assert_eq!(evaluate_eta(&zeros, &sur).unwrap().eta, 0.0);
    }

    #[test]
    fn eta_examples() {
        let rel = uniform(vec![vec![0.5]; 10], 1.0);
        let bin = BinaryGrid { intervals: rel.intervals.clone(), values: vec![vec![1]; 10] };
        assert_abs_diff_eq!(evaluate_eta(&rel, &bin).unwrap().eta, 5.0);
        let binary = uniform(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.3);
        let sur = sum_up_rounding(&binary).unwrap();
        assert_eq!(evaluate_eta(&binary, &sur).unwrap().eta, 0.0);
    }

    #[test]
    fn eta_rejects_mismatched_grids() {
        let rel = uniform(vec![vec![0.5]; 3], 1.0);
        let bin = BinaryGrid { intervals: rel.intervals[..2].to_vec(), values: vec![vec![1]; 2] };
        assert!(matches!(evaluate_eta(&rel, &bin), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..100 {
            let n = rng.gen_range(1..=8);
            let nc = rng.gen_range(1..=2);
            let dt = [0.1, 0.25, 1.0 / 3.0][case % 3];
            let values: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..nc).map(|_| if rng.gen_bool(0.2) { 0.5 } else { rng.gen() }).collect())
                .collect();
            let rel = uniform(values, dt);
            let up = [0.0, 0.3, 0.5][rng.gen_range(0..3)];
            let sol = solve_cia_bnb(&rel, up).unwrap();
            let (best, winner) = brute_force(&rel, up);
            assert!(sol.optimal);
            assert!((sol.bound.eta - best).abs() <= TIE_TOL, "case {case}: {} vs {best}", sol.bound.eta);
            assert_eq!(sol.grid.values, winner, "case {case}");
        }
    }

    #[test]
    fn bnb_output_is_dwell_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = rng.gen_range(10..120);
            let values: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen(), rng.gen::<f64>().powi(3)]).collect();
            let rel = uniform(values, 10.0 / n as f64);
            let c = DwellConstraints { min_uptime: rng.gen_range(0.0..1.0), min_downtime: rng.gen_range(0.0..0.5) };
            let sol = solve_cia(&rel, &CiaOptions { constraints: c, ..CiaOptions::default() }).unwrap();
            assert!(sol.optimal);
            assert!(is_dwell_feasible(&sol.grid, &c), "{:?}", dwell_violations(&sol.grid, &c));
        }
    }

    #[test]
    fn unconstrained_bnb_beats_sum_up_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.gen_range(5..200);
            let values: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen(), rng.gen()]).collect();
            let rel = uniform(values, 0.05);
            let sur = evaluate_eta(&rel, &sum_up_rounding(&rel).unwrap()).unwrap().eta;
            let bnb = solve_cia_bnb(&rel, 0.0).unwrap();
            assert!(bnb.bound.eta <= sur + 1e-12);
        }
    }

    #[test]
    fn node_limit_returns_feasible_incumbent() {
        let values: Vec<Vec<f64>> = (0..200).map(|k| vec![0.5 + 0.4 * (k as f64 * 0.37).sin()]).collect();
        let rel = uniform(values, 0.05);
        let c = DwellConstraints::min_uptime(0.5);
        let sol = solve_cia(&rel, &CiaOptions { constraints: c, node_limit: 50, ..CiaOptions::default() }).unwrap();
        assert!(!sol.optimal);
        assert!(is_dwell_feasible(&sol.grid, &c));
        let full = solve_cia(&rel, &CiaOptions { constraints: c, ..CiaOptions::default() }).unwrap();
        assert!(full.optimal && full.bound.eta <= sol.bound.eta);
    }

    #[test]
    fn dwell_checker_examples() {
        let rel = uniform(vec![vec![0.0]; 6], 0.1);
        let mk = |w: [u8; 6]| BinaryGrid { intervals: rel.intervals.clone(), values: w.iter().map(|&b| vec![b]).collect() };
        let c = DwellConstraints::min_uptime(0.3);
        assert!(is_dwell_feasible(&mk([0, 1, 1, 1, 0, 0]), &c));
        let v = dwell_violations(&mk([0, 1, 1, 0, 0, 0]), &c);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].first_interval, v[0].last_interval), (1, 2));
        // a short run reaching the end is exempt
        assert!(is_dwell_feasible(&mk([0, 0, 0, 0, 0, 1]), &c));
        let down = DwellConstraints { min_uptime: 0.0, min_downtime: 0.2 };
        assert!(!is_dwell_feasible(&mk([1, 0, 1, 1, 1, 1]), &down));
        // the initial off run is exempt
        assert!(is_dwell_feasible(&mk([0, 1, 1, 0, 0, 1]), &down));
    }

    #[test]
    fn csv_round_trip() {
        let rel = uniform(vec![vec![0.25, 1.0 / 3.0], vec![1.0, 0.0]], 0.1);
        let labels = vec!["u1".to_string(), "u2".to_string()];
        let mut buf = Vec::new();
        rel.write_csv(&labels, &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("t_left,t_right,u1,u2\n"));
        let (back, l) = RelaxedGrid::read_csv(buf.as_slice()).unwrap();
        assert_eq!((back, l), (rel.clone(), labels.clone()));

        let bin = sum_up_rounding(&rel).unwrap();
        let mut buf = Vec::new();
        bin.write_csv(&labels, &mut buf).unwrap();
        assert_eq!(BinaryGrid::read_csv(buf.as_slice()).unwrap().0, bin);
        let bad = "t_left,t_right,u1\n0,1,2\n";
        assert!(BinaryGrid::read_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn report_round_trip() {
        let rel = uniform(vec![vec![0.4]; 5], 0.2);
        let sol = solve_cia_bnb(&rel, 0.0).unwrap();
        let mut rep = CiaReport::new(&sol, &DwellConstraints::default(), 0.01);
        rep.simulated_cost = Some(12.5);
        let mut buf = Vec::new();
        rep.write_json(&mut buf).unwrap();
        assert_eq!(CiaReport::read_json(buf.as_slice()).unwrap(), rep);
    }

    #[test]
    fn execution_modes_agree() {
        let values: Vec<Vec<f64>> = (0..150).map(|k| vec![(k as f64 * 0.1).sin().abs(), (k as f64 * 0.07).cos().abs()]).collect();
        let rel = uniform(values, 10.0 / 150.0);
        let c = DwellConstraints::min_uptime(0.5);
        let a = solve_cia(&rel, &CiaOptions { constraints: c, execution: Execution::Sequential, ..CiaOptions::default() }).unwrap();
        let b = solve_cia(&rel, &CiaOptions { constraints: c, execution: Execution::Parallel, ..CiaOptions::default() }).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.nodes_expanded, b.nodes_expanded);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn tighter_uptime_never_lowers_eta(
            values in prop::collection::vec(0.0f64..=1.0, 4..60),
            a in 0.0f64..0.6,
            extra in 0.0f64..0.6,
        ) {
            let rel = uniform(values.into_iter().map(|v| vec![v]).collect(), 0.05);
            let ea = solve_cia_bnb(&rel, a).unwrap().bound.eta;
            let eb = solve_cia_bnb(&rel, a + extra).unwrap().bound.eta;
            prop_assert!(ea <= eb + TIE_TOL);
        }
    }
}
