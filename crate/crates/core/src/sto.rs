//! Switching time optimization on a fixed stage sequence.
//!
//! Each stage `i` of a sequence holds the discrete input constant for a
//! duration `w_i`. With the stage index as the independent variable `tau`
//! and `dt/dtau = w(tau)`, the stage durations become ordinary decision
//! variables and the discrete inputs drop out of the optimization:
//!
//! ```text
//!   min   int_0^ns L(x, u_bar, c, t(tau)) w dtau + sum_i (a_i e_i^2 + b_i w_i^2) / 2
//!   s.t.  dx/dtau = w f(x, u_bar, c, t(tau))
//!         w_i + e_i >= lb_i,  e_i >= 0,  w_i >= 0
//!         sum_i w_i = tf - t0
//! ```
//!
//! The transcription uses `m` uniform explicit Euler intervals per stage.
//! The lower bound rows are written as equalities with a surplus variable,
//! `w_i + e_i - s_i = lb_i`, so every inequality becomes a variable bound.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{ControlSchedule, ProblemSpec, RhsJacobians, StageCostGradient, Trajectory};
use crate::nlp::{self, NlpProblem, NlpSolution, SolverOptions, SparseMatrix, WarmStart};
use crate::relaxed::CHUNK;

/// Total number of intervals the default per-stage resolution aims for.
pub const TARGET_INTERVALS: usize = 300;
pub const MIN_NODES_PER_STAGE: usize = 20;
/// Largest augmented-Lagrangian penalty a warm start carries over. Later
/// problems differ in their stage costs, and a saturated penalty makes
/// their inner solves crawl.
pub const WARM_PENALTY_CAP: f64 = 1e4;

/// Intervals per stage giving about [`TARGET_INTERVALS`] in total.
pub fn default_nodes_per_stage(stages: usize) -> usize {
    let per = (TARGET_INTERVALS as f64 / stages.max(1) as f64).round() as usize;
    per.max(MIN_NODES_PER_STAGE)
}

/// Ordered discrete input values, one per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence {
    pub stages: Vec<Vec<f64>>,
}

impl Sequence {
    pub fn new(stages: Vec<Vec<f64>>) -> Self {
        Self { stages }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn validate(&self, spec: &ProblemSpec) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("sequence has no stages".into()));
        }
        if let Some((i, u)) = self.stages.iter().enumerate().find(|(_, u)| !spec.is_admissible_discrete(u)) {
            return Err(Error::InvalidArgument(format!("stage {i} value {u:?} is not an admissible discrete input")));
        }
        Ok(())
    }

    /// The stages at the given indices, in order.
    pub fn select(&self, keep: &[usize]) -> Self {
        Self { stages: keep.iter().map(|&i| self.stages[i].clone()).collect() }
    }
}

/// Stage durations `w_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DurationSet {
    pub w: Vec<f64>,
}

impl DurationSet {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("duration set is empty".into()));
        }
        if let Some(v) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("duration {v} is negative or not finite")));
        }
        Ok(Self { w })
    }

    pub fn stages(&self) -> usize {
        self.w.len()
    }

    pub fn total(&self) -> f64 {
        self.w.iter().sum()
    }

    /// Start time of every stage relative to `tau = 0`, plus the total.
    fn prefix(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.w.len() + 1);
        let mut acc = 0.0;
        s.push(acc);
        for w in &self.w {
            acc += w;
            s.push(acc);
        }
        s
    }

    fn check_tau(&self, tau: f64) -> Result<()> {
        if !(0.0..=self.w.len() as f64).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau = {tau} outside [0, {}]", self.w.len())));
        }
        Ok(())
    }

    /// `w(tau)`; the last stage's duration at `tau = ns`.
    pub fn w_of_tau(&self, tau: f64) -> Result<f64> {
        self.check_tau(tau)?;
        Ok(self.w[(tau.floor() as usize).min(self.w.len() - 1)])
    }

    /// Elapsed time `t(tau) = int_0^tau w`.
    pub fn time_of_tau(&self, tau: f64) -> Result<f64> {
        self.check_tau(tau)?;
        let s = self.prefix();
        let i = tau.floor() as usize;
        if i >= self.w.len() {
            return Ok(s[self.w.len()]);
        }
        Ok(s[i] + (tau - i as f64) * self.w[i])
    }

    /// Smallest `tau` with `t(tau) = t`. Times beyond the total by no more
    /// than rounding error are clamped.
    pub fn tau_of_time(&self, t: f64) -> Result<f64> {
        let s = self.prefix();
        let total = s[self.w.len()];
        let slack = 4.0 * f64::EPSILON * total.max(1.0);
        if !(t >= -slack && t <= total + slack) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, {total}]")));
        }
        let t = t.clamp(0.0, total);
        for (i, &w) in self.w.iter().enumerate() {
            if t <= s[i] {
                return Ok(i as f64);
            }
            if t < s[i] + w {
                return Ok(i as f64 + (t - s[i]) / w);
            }
        }
        // only reachable at the total when trailing stages have zero length
        let last = self.w.iter().rposition(|&w| w > 0.0).map_or(0, |i| i + 1);
        Ok(last as f64)
    }
}

/// Weights of the slack penalty `a e^2 / 2` and the duration penalty
/// `b w^2 / 2` of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub a: f64,
    pub b: f64,
}

/// Per-stage timing data of an STO problem.
#[derive(Debug, Clone, PartialEq)]
pub struct StoSetup {
    /// Euler intervals per stage.
    pub nodes_per_stage: usize,
    /// Lower bounds on the stage durations; zero means unconstrained.
    pub lower_bounds: Vec<f64>,
    pub costs: Vec<StageCost>,
}

impl StoSetup {
    /// Every stage gets the same lower bound and the given costs.
    pub fn uniform(stages: usize, nodes_per_stage: usize, lower_bound: f64, cost: StageCost) -> Self {
        Self {
            nodes_per_stage,
            lower_bounds: vec![lower_bound; stages],
            costs: vec![cost; stages],
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoTranscription {
    spec: ProblemSpec,
    sequence: Sequence,
    m: usize,
    dtau: f64,
    lower_bounds: Vec<f64>,
    costs: Vec<StageCost>,
    /// Slack slot of each stage with a positive lower bound.
    slack_slot: Vec<Option<usize>>,
    constrained: Vec<usize>,
    exec: Execution,
}

pub fn transcribe_sto(spec: &ProblemSpec, sequence: &Sequence, setup: &StoSetup) -> Result<StoTranscription> {
    StoTranscription::new(spec, sequence, setup)
}

impl StoTranscription {
    pub fn new(spec: &ProblemSpec, sequence: &Sequence, setup: &StoSetup) -> Result<Self> {
        spec.validate()?;
        sequence.validate(spec)?;
        if spec.dynamics.path_constraint_count() > 0 {
            return Err(Error::InvalidArgument(
                "path constraints are not supported by the Euler transcriptions".into(),
            ));
        }
        let ns = sequence.len();
        if setup.nodes_per_stage < 1 {
            return Err(Error::InvalidArgument("need at least one interval per stage".into()));
        }
        if setup.lower_bounds.len() != ns || setup.costs.len() != ns {
            return Err(Error::InvalidArgument(format!(
                "{} lower bounds and {} costs for {ns} stages",
                setup.lower_bounds.len(),
                setup.costs.len()
            )));
        }
        if let Some(v) = setup.lower_bounds.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("stage lower bound {v} is negative or not finite")));
        }
        if let Some(c) = setup.costs.iter().find(|c| !(c.a >= 0.0 && c.b >= 0.0 && c.a.is_finite() && c.b.is_finite())) {
            return Err(Error::InvalidArgument(format!("stage costs {c:?} must be finite and >= 0")));
        }
        let mut slack_slot = vec![None; ns];
        let mut constrained = Vec::new();
        for (i, &lb) in setup.lower_bounds.iter().enumerate() {
            if lb > 0.0 {
                slack_slot[i] = Some(constrained.len());
                constrained.push(i);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            sequence: sequence.clone(),
            m: setup.nodes_per_stage,
            dtau: 1.0 / setup.nodes_per_stage as f64,
            lower_bounds: setup.lower_bounds.clone(),
            costs: setup.costs.clone(),
            slack_slot,
            constrained,
            exec: Execution::default(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn stages(&self) -> usize {
        self.sequence.len()
    }

    pub fn intervals(&self) -> usize {
        self.stages() * self.m
    }

    fn nx(&self) -> usize {
        self.spec.state_dim
    }
    fn nc(&self) -> usize {
        self.spec.continuous_dim
    }

    pub fn state_index(&self, j: usize) -> usize {
        j * self.nx()
    }

    pub fn continuous_index(&self, j: usize) -> usize {
        (self.intervals() + 1) * self.nx() + j * self.nc()
    }

    pub fn duration_index(&self, s: usize) -> usize {
        (self.intervals() + 1) * self.nx() + self.intervals() * self.nc() + s
    }

    fn slack_index(&self, q: usize) -> usize {
        self.duration_index(self.stages()) + q
    }

    fn surplus_index(&self, q: usize) -> usize {
        self.slack_index(self.constrained.len()) + q
    }

    fn matching_row(&self, j: usize) -> usize {
        self.nx() * (1 + j)
    }

    fn sum_row(&self) -> usize {
        self.matching_row(self.intervals())
    }

    fn durations<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        let w0 = self.duration_index(0);
        &z[w0..w0 + self.stages()]
    }

    /// Stage start times (relative to `t0`) for the durations in `z`.
    fn stage_starts(&self, z: &[f64]) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.stages());
        let mut acc = 0.0;
        for w in self.durations(z) {
            s.push(acc);
            acc += w;
        }
        s
    }

    /// Stage, position within the stage as a fraction, and time of the
    /// left node of interval `j`.
    #[inline]
    fn locate(&self, j: usize, starts: &[f64], w: &[f64]) -> (usize, f64, f64) {
        let s = j / self.m;
        let frac = (j - s * self.m) as f64 * self.dtau;
        (s, frac, self.spec.t0 + starts[s] + frac * w[s])
    }

    fn interval<'a>(&self, z: &'a [f64], j: usize) -> (&'a [f64], &'a [f64]) {
        let (xi, ci) = (self.state_index(j), self.continuous_index(j));
        (&z[xi..xi + self.nx()], &z[ci..ci + self.nc()])
    }

    /// Penalty-free cost and the stage-cost quadrature per node.
    fn running_cost(&self, z: &[f64]) -> Vec<f64> {
        let w = self.durations(z);
        let starts = self.stage_starts(z);
        let mut running = Vec::with_capacity(self.intervals() + 1);
        running.push(0.0);
        for j in 0..self.intervals() {
            let (s, _, t) = self.locate(j, &starts, w);
            let (x, c) = self.interval(z, j);
            let l = self.spec.dynamics.stage_cost(x, &self.sequence.stages[s], c, t);
            running.push(running[j] + self.dtau * w[s] * l);
        }
        running
    }

    /// Maps a decision vector to a trajectory on the induced time grid.
    pub fn unpack(&self, z: &[f64]) -> Trajectory {
        let w = self.durations(z);
        let starts = self.stage_starts(z);
        let n = self.intervals();
        let mut times: Vec<f64> = (0..n).map(|j| self.locate(j, &starts, w).2).collect();
        times.push(self.spec.t0 + w.iter().sum::<f64>());
        let last = &z[self.state_index(n)..][..self.nx()];
        Trajectory {
            times,
            states: (0..=n).map(|j| z[self.state_index(j)..][..self.nx()].to_vec()).collect(),
            discrete: (0..n).map(|j| self.sequence.stages[j / self.m].clone()).collect(),
            continuous: (0..n).map(|j| self.interval(z, j).1.to_vec()).collect(),
            running_cost: self.running_cost(z),
            terminal_cost: self.spec.dynamics.terminal_cost(last),
        }
    }

    /// Decision vector and multipliers from a (restricted) earlier solution.
    /// Stages solved on a different grid are resampled onto this one.
    pub fn warm_start(&self, ws: &StoWarmStart) -> Result<WarmStart> {
        if ws.stages.len() != self.stages() {
            return Err(Error::Precondition(format!(
                "warm start has {} stages, transcription {}",
                ws.stages.len(),
                self.stages()
            )));
        }
        let (nx, nc, m) = (self.nx(), self.nc(), self.m);
        let mut z = self.initial_guess();
        let mut y = vec![0.0; self.num_constraints()];
        y[..nx].copy_from_slice(&ws.initial_multipliers);
        y[self.sum_row()] = ws.sum_multiplier;
        for (s, b) in ws.stages.iter().enumerate() {
            let j0 = s * m;
            let old = ws.nodes_per_stage;
            for k in 0..m {
                // right node of the new interval k, and its midpoint
                let states = resample_nodes(&b.states, nx, old, (k + 1) as f64 / m as f64);
                z[self.state_index(j0 + k + 1)..][..nx].copy_from_slice(&states);
                let src = (((k as f64 + 0.5) / m as f64) * old as f64) as usize;
                let src = src.min(old - 1);
                z[self.continuous_index(j0 + k)..][..nc].copy_from_slice(&b.controls[src * nc..][..nc]);
                let mult = resample_nodes(&b.matching_multipliers, nx, old, (k + 1) as f64 / m as f64);
                y[self.matching_row(j0 + k)..][..nx].copy_from_slice(&mult);
            }
            z[self.duration_index(s)] = b.w;
            if let Some(q) = self.slack_slot[s] {
                let lb = self.lower_bounds[s];
                let (e, sp, mult) = b.slack.unwrap_or(((lb - b.w).max(0.0), (b.w - lb).max(0.0), 0.0));
                z[self.slack_index(q)] = e;
                z[self.surplus_index(q)] = sp;
                y[self.sum_row() + 1 + q] = mult;
            }
        }
        Ok(WarmStart { z, multipliers: Some(y), penalty: Some(ws.penalty.min(WARM_PENALTY_CAP)) })
    }

    fn capture(&self, sol: &NlpSolution) -> StoWarmStart {
        let (nx, nc) = (self.nx(), self.nc());
        let (z, y) = (&sol.z, &sol.multipliers);
        let stages = (0..self.stages())
            .map(|s| {
                let j0 = s * self.m;
                StageBlock {
                    states: z[self.state_index(j0 + 1)..][..self.m * nx].to_vec(),
                    controls: z[self.continuous_index(j0)..][..self.m * nc].to_vec(),
                    w: z[self.duration_index(s)],
                    matching_multipliers: y[self.matching_row(j0)..][..self.m * nx].to_vec(),
                    slack: self.slack_slot[s].map(|q| {
                        (z[self.slack_index(q)], z[self.surplus_index(q)], y[self.sum_row() + 1 + q])
                    }),
                }
            })
            .collect();
        StoWarmStart {
            nodes_per_stage: self.m,
            stages,
            initial_multipliers: y[..nx].to_vec(),
            sum_multiplier: y[self.sum_row()],
            penalty: sol.penalty,
        }
    }
}

impl NlpProblem for StoTranscription {
    fn num_variables(&self) -> usize {
        self.surplus_index(self.constrained.len())
    }

    fn num_constraints(&self) -> usize {
        self.sum_row() + 1 + self.constrained.len()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_variables();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for j in 0..self.intervals() {
            for (i, b) in self.spec.continuous_bounds.iter().enumerate() {
                lo[self.continuous_index(j) + i] = b[0];
                hi[self.continuous_index(j) + i] = b[1];
            }
        }
        for v in lo.iter_mut().skip(self.duration_index(0)) {
            *v = 0.0;
        }
        (lo, hi)
    }

    /// Uniform durations, continuous inputs at the midpoint of their bounds,
    /// states from an explicit Euler pass under those inputs, slack and
    /// surplus consistent with the timing rows.
    fn initial_guess(&self) -> Vec<f64> {
        let nx = self.nx();
        let mut z = vec![0.0; self.num_variables()];
        z[..nx].copy_from_slice(&self.spec.x0);
        for j in 0..self.intervals() {
            for (i, b) in self.spec.continuous_bounds.iter().enumerate() {
                z[self.continuous_index(j) + i] = 0.5 * (b[0] + b[1]);
            }
        }
        let w = self.spec.duration() / self.stages() as f64;
        for s in 0..self.stages() {
            z[self.duration_index(s)] = w;
        }
        for (q, &s) in self.constrained.iter().enumerate() {
            let lb = self.lower_bounds[s];
            z[self.slack_index(q)] = (lb - w).max(0.0);
            z[self.surplus_index(q)] = (w - lb).max(0.0);
        }
        let ws = self.durations(&z).to_vec();
        let starts = self.stage_starts(&z);
        let mut f = vec![0.0; nx];
        for j in 0..self.intervals() {
            let (s, _, t) = self.locate(j, &starts, &ws);
            let (x, c) = self.interval(&z, j);
            let (x, c) = (x.to_vec(), c.to_vec());
            self.spec.dynamics.rhs(&x, &self.sequence.stages[s], &c, t, &mut f);
            for i in 0..nx {
                let next = x[i] + self.dtau * ws[s] * f[i];
                // hold the state where the pass leaves the model's domain
                z[self.state_index(j + 1) + i] = if next.is_finite() { next } else { x[i] };
            }
        }
        z
    }

    fn objective(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let (nx, nc, ns) = (self.nx(), self.nc(), self.stages());
        let dynamics = &self.spec.dynamics;
        let w = self.durations(z);
        let starts = self.stage_starts(z);
        let intervals = self.intervals();
        let chunks = intervals.div_ceil(CHUNK);
        // (cost, per-interval [dx, dc] blocks, duration gradient)
        let parts = self.exec.map_indexed(chunks, |ci| {
            let mut sum = 0.0;
            let mut local = Vec::with_capacity(CHUNK * (nx + nc));
            let mut gw = vec![0.0; ns];
            let mut g = StageCostGradient::zeros(nx, self.spec.discrete_dim, nc);
            for j in ci * CHUNK..((ci + 1) * CHUNK).min(intervals) {
                let (s, frac, t) = self.locate(j, &starts, w);
                let (x, c) = self.interval(z, j);
                let u = &self.sequence.stages[s];
                let l = dynamics.stage_cost(x, u, c, t);
                dynamics.stage_cost_gradient(x, u, c, t, &mut g);
                let scale = self.dtau * w[s];
                sum += scale * l;
                local.extend(g.dx.iter().chain(&g.dc).map(|v| scale * v));
                gw[s] += self.dtau * l + scale * g.dt * frac;
                for gv in &mut gw[..s] {
                    *gv += scale * g.dt;
                }
            }
            (sum, local, gw)
        });
        grad.fill(0.0);
        let mut total = 0.0;
        let w0 = self.duration_index(0);
        for (ci, (sum, local, gw)) in parts.into_iter().enumerate() {
            total += sum;
            for (k, block) in local.chunks(nx + nc).enumerate() {
                let j = ci * CHUNK + k;
                grad[self.state_index(j)..][..nx].copy_from_slice(&block[..nx]);
                grad[self.continuous_index(j)..][..nc].copy_from_slice(&block[nx..]);
            }
            for (s, v) in gw.into_iter().enumerate() {
                grad[w0 + s] += v;
            }
        }
        let last = &z[self.state_index(intervals)..][..nx];
        total += dynamics.terminal_cost(last);
        let mut tg = vec![0.0; nx];
        dynamics.terminal_cost_gradient(last, &mut tg);
        for (i, v) in tg.into_iter().enumerate() {
            grad[self.state_index(intervals) + i] += v;
        }
        for s in 0..ns {
            let b = self.costs[s].b;
            total += 0.5 * b * w[s] * w[s];
            grad[w0 + s] += b * w[s];
        }
        for (q, &s) in self.constrained.iter().enumerate() {
            let (a, e) = (self.costs[s].a, z[self.slack_index(q)]);
            total += 0.5 * a * e * e;
            grad[self.slack_index(q)] += a * e;
        }
        total
    }

    fn constraints(&self, z: &[f64], out: &mut [f64]) {
        let nx = self.nx();
        for i in 0..nx {
            out[i] = z[i] - self.spec.x0[i];
        }
        let w = self.durations(z);
        let starts = self.stage_starts(z);
        let intervals = self.intervals();
        let sum_row = self.sum_row();
        self.exec.for_each_chunk_mut(&mut out[nx..sum_row], CHUNK * nx, |ci, rows| {
            let mut f = vec![0.0; nx];
            for (k, row) in rows.chunks_mut(nx).enumerate() {
                let j = ci * CHUNK + k;
                debug_assert!(j < intervals);
                let (s, _, t) = self.locate(j, &starts, w);
                let (x, c) = self.interval(z, j);
                self.spec.dynamics.rhs(x, &self.sequence.stages[s], c, t, &mut f);
                let next = &z[self.state_index(j + 1)..][..nx];
                for i in 0..nx {
                    row[i] = next[i] - x[i] - self.dtau * w[s] * f[i];
                }
            }
        });
        out[sum_row] = w.iter().sum::<f64>() - self.spec.duration();
        for (q, &s) in self.constrained.iter().enumerate() {
            out[sum_row + 1 + q] = w[s] + z[self.slack_index(q)] - z[self.surplus_index(q)] - self.lower_bounds[s];
        }
    }

    fn jacobian(&self, z: &[f64]) -> SparseMatrix {
        let (nx, nu, nc, ns) = (self.nx(), self.spec.discrete_dim, self.nc(), self.stages());
        let w = self.durations(z);
        let starts = self.stage_starts(z);
        let intervals = self.intervals();
        let w0 = self.duration_index(0);
        let per_interval = nx * (1 + nx + nc + ns);
        let mut jac = SparseMatrix::with_capacity(
            self.num_constraints(),
            self.num_variables(),
            nx + intervals * per_interval + ns + 3 * self.constrained.len(),
        );
        for i in 0..nx {
            jac.push(i, i, 1.0);
        }
        let chunks = intervals.div_ceil(CHUNK);
        let blocks = self.exec.map_indexed(chunks, |ci| {
            let mut entries = Vec::with_capacity(CHUNK * per_interval);
            let mut d = RhsJacobians::zeros(nx, nu, nc);
            let mut f = vec![0.0; nx];
            for j in ci * CHUNK..((ci + 1) * CHUNK).min(intervals) {
                let (s, frac, t) = self.locate(j, &starts, w);
                let (x, c) = self.interval(z, j);
                let u = &self.sequence.stages[s];
                self.spec.dynamics.rhs(x, u, c, t, &mut f);
                self.spec.dynamics.rhs_jacobians(x, u, c, t, &mut d);
                let scale = self.dtau * w[s];
                let row0 = self.matching_row(j);
                for i in 0..nx {
                    let row = row0 + i;
                    entries.push((row, self.state_index(j + 1) + i, 1.0));
                    for l in 0..nx {
                        let delta = if i == l { 1.0 } else { 0.0 };
                        entries.push((row, self.state_index(j) + l, -delta - scale * d.dx[i * nx + l]));
                    }
                    for l in 0..nc {
                        entries.push((row, self.continuous_index(j) + l, -scale * d.dc[i * nc + l]));
                    }
                    // earlier stages shift the time of this interval
                    for p in 0..s {
                        entries.push((row, w0 + p, -scale * d.dt[i]));
                    }
                    entries.push((row, w0 + s, -self.dtau * (f[i] + w[s] * d.dt[i] * frac)));
                }
            }
            entries
        });
        for (r, c, v) in blocks.into_iter().flatten() {
            jac.push(r, c, v);
        }
        let sum_row = self.sum_row();
        for s in 0..ns {
            jac.push(sum_row, w0 + s, 1.0);
        }
        for (q, &s) in self.constrained.iter().enumerate() {
            let row = sum_row + 1 + q;
            jac.push(row, w0 + s, 1.0);
            jac.push(row, self.slack_index(q), 1.0);
            jac.push(row, self.surplus_index(q), -1.0);
        }
        jac
    }

    fn objective_coupling(&self) -> Option<Vec<(usize, usize)>> {
        // stage costs share the matching rows of their interval, penalties
        // are separable
        let last = self.state_index(self.intervals());
        let nx = self.nx();
        Some((0..nx).flat_map(|i| (0..i).map(move |j| (last + i, last + j))).collect())
    }
}

/// Linear interpolation at fraction `f` of a stage in a per-node series
/// holding values at the right node of each of `m` intervals. The left end
/// takes the first node's value.
fn resample_nodes(series: &[f64], width: usize, m: usize, f: f64) -> Vec<f64> {
    let pos = f * m as f64 - 1.0;
    if pos <= 0.0 {
        return series[..width].to_vec();
    }
    let i = (pos.floor() as usize).min(m - 1);
    let j = (i + 1).min(m - 1);
    let r = pos - i as f64;
    (0..width).map(|l| (1.0 - r) * series[i * width + l] + r * series[j * width + l]).collect()
}

/// Solution pieces of one stage, kept so a later problem on a subsequence
/// can start from them.
#[derive(Debug, Clone, PartialEq)]
struct StageBlock {
    /// States at the right node of each interval.
    states: Vec<f64>,
    controls: Vec<f64>,
    w: f64,
    matching_multipliers: Vec<f64>,
    /// Slack, surplus and timing-row multiplier.
    slack: Option<(f64, f64, f64)>,
}

/// Starting point for [`solve_sto`] built from an earlier solution.
#[derive(Debug, Clone, PartialEq)]
pub struct StoWarmStart {
    nodes_per_stage: usize,
    stages: Vec<StageBlock>,
    initial_multipliers: Vec<f64>,
    sum_multiplier: f64,
    penalty: f64,
}

#[derive(Debug, Clone)]
pub struct StoSolution {
    pub sequence: Sequence,
    pub durations: DurationSet,
    /// Violation `max(0, lb_i - w_i)` of each stage's lower bound.
    pub slacks: Vec<f64>,
    pub lower_bounds: Vec<f64>,
    pub costs: Vec<StageCost>,
    pub nodes_per_stage: usize,
    /// Cost of the trajectory, without the slack and duration penalties.
    pub cost: f64,
    /// Objective including the penalties.
    pub penalized_cost: f64,
    /// Trajectory on the time grid induced by the durations.
    pub trajectory: Trajectory,
    /// Multipliers of the `w_i >= 0` bounds.
    pub duration_multipliers: Vec<f64>,
    /// Multipliers of the timing rows (zero for unconstrained stages).
    pub timing_multipliers: Vec<f64>,
    pub nlp: NlpSolution,
    warm: StoWarmStart,
}

/// JSON form of an [`StoSolution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoReport {
    pub sequence: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub e: Vec<f64>,
    pub cost: f64,
    pub penalized_cost: f64,
    pub lower_bounds: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub nodes_per_stage: usize,
    pub solver_iterations: usize,
}

impl StoReport {
    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        Ok(serde_json::from_reader(input)?)
    }
}

impl StoSolution {
    /// Warm start for the subsequence of stages `keep` (indices into this
    /// solution's sequence, ascending).
    pub fn warm_start(&self, keep: &[usize]) -> Result<StoWarmStart> {
        if keep.is_empty() || keep.windows(2).any(|p| p[0] >= p[1]) || keep.iter().any(|&i| i >= self.sequence.len()) {
            return Err(Error::InvalidArgument(format!("bad stage selection {keep:?}")));
        }
        let mut ws = self.warm.clone();
        ws.stages = keep.iter().map(|&i| self.warm.stages[i].clone()).collect();
        Ok(ws)
    }

    pub fn report(&self) -> StoReport {
        StoReport {
            sequence: self.sequence.stages.clone(),
            w: self.durations.w.clone(),
            e: self.slacks.clone(),
            cost: self.cost,
            penalized_cost: self.penalized_cost,
            lower_bounds: self.lower_bounds.clone(),
            a: self.costs.iter().map(|c| c.a).collect(),
            b: self.costs.iter().map(|c| c.b).collect(),
            nodes_per_stage: self.nodes_per_stage,
            solver_iterations: self.nlp.iterations,
        }
    }

    /// Control schedule on the induced grid for [`crate::model::simulate`].
    pub fn schedule(&self) -> ControlSchedule {
        ControlSchedule {
            times: self.trajectory.times.clone(),
            discrete: self.trajectory.discrete.clone(),
            continuous: self.trajectory.continuous.clone(),
        }
    }
}

/// Solves the STO problem, optionally from an earlier solution restricted
/// to the current sequence.
pub fn solve_sto(
    spec: &ProblemSpec,
    sequence: &Sequence,
    setup: &StoSetup,
    opts: &SolverOptions,
    warm: Option<&StoWarmStart>,
) -> Result<StoSolution> {
    let tr = StoTranscription::new(spec, sequence, setup)?.with_execution(opts.execution);
    let start = warm.map(|ws| tr.warm_start(ws)).transpose()?;
    let sol = nlp::solve_from(&tr, opts, start.as_ref())?;
    if !sol.is_converged() {
        return Err(Error::NotConverged {
            status: sol.status,
            iterations: sol.iterations,
            solution: Box::new(sol),
        });
    }
    let w = tr.durations(&sol.z).to_vec();
    let slacks = w.iter().zip(&setup.lower_bounds).map(|(w, lb)| (lb - w).max(0.0)).collect();
    let trajectory = tr.unpack(&sol.z);
    let w0 = tr.duration_index(0);
    let timing_multipliers = (0..tr.stages())
        .map(|s| tr.slack_slot[s].map_or(0.0, |q| sol.multipliers[tr.sum_row() + 1 + q]))
        .collect();
    Ok(StoSolution {
        sequence: sequence.clone(),
        durations: DurationSet::new(w.iter().map(|v| v.max(0.0)).collect())?,
        slacks,
        lower_bounds: setup.lower_bounds.clone(),
        costs: setup.costs.clone(),
        nodes_per_stage: setup.nodes_per_stage,
        cost: trajectory.total_cost(),
        penalized_cost: sol.objective_value,
        duration_multipliers: sol.bound_multipliers[w0..w0 + tr.stages()].to_vec(),
        timing_multipliers,
        trajectory,
        warm: tr.capture(&sol),
        nlp: sol,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{simulate, DoubleTankParams};
    use crate::nlp::check_derivatives;

    fn ds(w: &[f64]) -> DurationSet {
        DurationSet::new(w.to_vec()).unwrap()
    }

    fn tank() -> ProblemSpec {
        DoubleTankParams::default().problem()
    }

    fn seq(stages: &[[f64; 2]]) -> Sequence {
        Sequence::new(stages.iter().map(|s| s.to_vec()).collect())
    }

    const FREE: StageCost = StageCost { a: 1.0, b: 0.0 };

    #[test]
    fn w_of_tau_examples() {
        let w = ds(&[2.0, 3.0, 5.0]);
        assert_eq!(w.w_of_tau(0.5).unwrap(), 2.0);
        assert_eq!(w.w_of_tau(1.0).unwrap(), 3.0);
        assert_eq!(w.w_of_tau(3.0).unwrap(), 5.0);
        assert!(matches!(w.w_of_tau(3.5), Err(Error::InvalidArgument(_))));
        assert!(w.w_of_tau(-0.1).is_err());
    }

    #[test]
    fn time_of_tau_examples() {
        let w = ds(&[2.0, 3.0, 5.0]);
        assert_eq!(w.time_of_tau(3.0).unwrap(), 10.0);
        assert_eq!(w.time_of_tau(1.5).unwrap(), 3.5);
        assert_eq!(ds(&[2.0, 0.0, 3.0]).time_of_tau(1.7).unwrap(), 2.0);
        assert!(w.time_of_tau(4.0).is_err());
    }

    #[test]
    fn tau_of_time_examples() {
        assert_eq!(ds(&[2.0, 0.0, 3.0]).tau_of_time(2.0).unwrap(), 1.0);
        let w = ds(&[2.0, 3.0, 5.0]);
        assert_eq!(w.tau_of_time(3.5).unwrap(), 1.5);
        assert_eq!(w.tau_of_time(0.0).unwrap(), 0.0);
        assert_eq!(w.tau_of_time(10.0).unwrap(), 3.0);
        assert_eq!(ds(&[2.0, 3.0, 0.0]).tau_of_time(5.0).unwrap(), 2.0);
        assert!(w.tau_of_time(10.5).is_err());
    }

    proptest! {
        #[test]
        fn transform_round_trips(
            w in prop::collection::vec(0.01f64..10.0, 1..12),
            u in 0.0f64..1.0,
        ) {
            let d = ds(&w);
            let tau = u * w.len() as f64;
            prop_assert!((d.tau_of_time(d.time_of_tau(tau).unwrap()).unwrap() - tau).abs() < 1e-12);
            let t = u * d.total();
            prop_assert!((d.time_of_tau(d.tau_of_time(t).unwrap()).unwrap() - t).abs() < 1e-12);
        }

        #[test]
        fn min_rule_on_plateaus(
            w in prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..5.0], 1..10),
            u in 0.0f64..1.0,
        ) {
            prop_assume!(w.iter().any(|&v| v > 0.0));
            let d = ds(&w);
            let tau = u * w.len() as f64;
            prop_assert!(d.tau_of_time(d.time_of_tau(tau).unwrap()).unwrap() <= tau + 1e-12);
        }
    }

    #[test]
    fn layout_and_sizes() {
        let spec = tank();
        let s = seq(&[[1.0, 0.0], [0.0, 1.0]]);
        let setup = StoSetup {
            nodes_per_stage: 3,
            lower_bounds: vec![0.5, 0.0],
            costs: vec![FREE; 2],
        };
        let tr = transcribe_sto(&spec, &s, &setup).unwrap();
        // 7 nodes x 2 states, 6 c2, 2 w, 1 slack, 1 surplus
        assert_eq!(tr.num_variables(), 14 + 6 + 2 + 2);
        // init, 6 x 2 matching, sum, one timing row
        assert_eq!(tr.num_constraints(), 2 + 12 + 1 + 1);
        let bad = StoSetup { nodes_per_stage: 0, ..setup.clone() };
        assert!(transcribe_sto(&spec, &s, &bad).is_err());
        assert!(transcribe_sto(&spec, &seq(&[[0.5, 1.0]]), &StoSetup::uniform(1, 3, 0.0, FREE)).is_err());
        assert!(transcribe_sto(&spec, &Sequence::new(vec![]), &StoSetup::uniform(0, 3, 0.0, FREE)).is_err());
    }

    #[test]
    fn derivatives_match_central_differences() {
        let spec = tank();
        let s = seq(&[[1.0, 1.0], [0.0, 1.0], [1.0, 0.0], [0.0, 0.0]]);
        let setup = StoSetup {
            nodes_per_stage: 5,
            lower_bounds: vec![0.5, 0.5, 0.0, 0.5],
            costs: vec![StageCost { a: 2.0, b: 0.0 }, StageCost { a: 0.0, b: 10.0 }, FREE, StageCost { a: 100.0, b: 3.0 }],
        };
        let tr = transcribe_sto(&spec, &s, &setup).unwrap();
        let report = check_derivatives(&tr, &tr.initial_guess(), Execution::Sequential);
        assert!(report.is_clean(), "{report:?}");
        let (lo, hi) = tr.bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let z: Vec<f64> = (0..tr.num_variables())
                .map(|i| {
                    let (a, b) = (lo[i].max(0.2), hi[i].min(5.0));
                    rng.gen_range(a..b)
                })
                .collect();
            let report = check_derivatives(&tr, &z, Execution::Sequential);
            assert!(report.max_gradient_error < 1e-5 && report.max_jacobian_error < 1e-5, "{report:?}");
        }
    }

    /// Stage cost depending on time through a shifted reference, to cover
    /// the chain rule through earlier durations.
    #[test]
    fn time_dependent_terms_are_differentiated() {
        #[derive(Debug)]
        struct Drift;
        impl crate::model::SwitchedDynamics for Drift {
            fn rhs(&self, x: &[f64], u: &[f64], c: &[f64], t: f64, dx: &mut [f64]) {
                dx[0] = u[0] * c[0] - x[0] + t.sin();
            }
            fn rhs_jacobians(&self, _x: &[f64], u: &[f64], _c: &[f64], t: f64, j: &mut RhsJacobians) {
                j.dx[0] = -1.0;
                j.du[0] = 0.0;
                j.dc[0] = u[0];
                j.dt[0] = t.cos();
            }
            fn stage_cost(&self, x: &[f64], _u: &[f64], c: &[f64], t: f64) -> f64 {
                (x[0] - t).powi(2) + c[0] * c[0]
            }
            fn stage_cost_gradient(&self, x: &[f64], _u: &[f64], c: &[f64], t: f64, g: &mut StageCostGradient) {
                g.dx[0] = 2.0 * (x[0] - t);
                g.du[0] = 0.0;
                g.dc[0] = 2.0 * c[0];
                g.dt = -2.0 * (x[0] - t);
            }
        }
        let spec = ProblemSpec {
            state_dim: 1,
            discrete_dim: 1,
            continuous_dim: 1,
            continuous_bounds: vec![[-1.0, 1.0]],
            discrete_values: vec![vec![0.0], vec![1.0]],
            t0: 0.5,
            tf: 3.0,
            x0: vec![0.3],
            labels: crate::model::Labels { states: vec!["x".into()], discrete: vec!["u".into()], continuous: vec!["c".into()] },
            dynamics: std::sync::Arc::new(Drift),
        };
        let tr = transcribe_sto(&spec, &Sequence::new(vec![vec![1.0], vec![0.0], vec![1.0]]), &StoSetup::uniform(3, 4, 0.3, FREE)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..tr.num_variables()).map(|_| rng.gen_range(0.1..0.9)).collect();
        let report = check_derivatives(&tr, &z, Execution::Sequential);
        assert!(report.is_clean(), "{report:?}");
        let sol = solve_sto(&spec, &tr.sequence, &StoSetup::uniform(3, 4, 0.3, FREE), &SolverOptions::default(), None).unwrap();
        assert_abs_diff_eq!(sol.durations.total(), 2.5, epsilon = 1e-7);
        assert_abs_diff_eq!(*sol.trajectory.times.last().unwrap(), 3.0, epsilon = 1e-7);
    }

    #[test]
    fn single_stage_pins_duration() {
        let spec = tank();
        let s = seq(&[[0.0, 1.0]]);
        let sol = solve_sto(&spec, &s, &StoSetup::uniform(1, 40, 0.0, FREE), &SolverOptions::default(), None).unwrap();
        assert_abs_diff_eq!(sol.durations.w[0], 10.0, epsilon = 1e-7);
        assert_eq!(sol.slacks, vec![0.0]);
        assert_abs_diff_eq!(sol.cost, sol.penalized_cost, epsilon = 1e-12);
    }

    #[test]
    fn solution_invariants_and_resimulation() {
        let spec = tank();
        let s = seq(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        let setup = StoSetup::uniform(3, 30, 0.0, FREE);
        let sol = solve_sto(&spec, &s, &setup, &SolverOptions::default(), None).unwrap();
        assert!((sol.durations.total() - 10.0).abs() < 1e-7);
        assert!(sol.durations.w.iter().all(|&w| w >= 0.0));
        assert!(sol.slacks.iter().all(|&e| e == 0.0));
        let sim = simulate(&spec, &sol.schedule(), &spec.x0).unwrap();
        assert!((sim.total_cost() - sol.cost).abs() <= 1e-6 * sol.cost, "{} vs {}", sim.total_cost(), sol.cost);
    }

    #[test]
    fn warm_start_from_solution_is_immediate() {
        let spec = tank();
        let s = seq(&[[1.0, 0.0], [0.0, 1.0]]);
        let setup = StoSetup::uniform(2, 30, 0.5, FREE);
        let opts = SolverOptions::default();
        let first = solve_sto(&spec, &s, &setup, &opts, None).unwrap();
        let again = solve_sto(&spec, &s, &setup, &opts, Some(&first.warm_start(&[0, 1]).unwrap())).unwrap();
        assert!(again.nlp.iterations <= 3, "{} iterations", again.nlp.iterations);
        assert_abs_diff_eq!(again.cost, first.cost, epsilon = 1e-6 * first.cost);
        assert!(first.warm_start(&[1, 0]).is_err());
        assert!(solve_sto(&spec, &s, &setup, &opts, Some(&first.warm_start(&[1]).unwrap())).is_err());
    }

    #[test]
    fn zero_length_stage_is_inert() {
        let spec = tank();
        let opts = SolverOptions::default();
        let base = solve_sto(&spec, &seq(&[[0.0, 1.0]]), &StoSetup::uniform(1, 30, 0.0, FREE), &opts, None).unwrap();
        // a stage that can only hurt: both pumps on, heavily penalized length
        let with = solve_sto(
            &spec,
            &seq(&[[0.0, 1.0], [1.0, 1.0]]),
            &StoSetup {
                nodes_per_stage: 30,
                lower_bounds: vec![0.0; 2],
                costs: vec![FREE, StageCost { a: 0.0, b: 1e6 }],
            },
            &opts,
            None,
        )
        .unwrap();
        assert!(with.durations.w[1] < 1e-5, "{:?}", with.durations.w);
        assert!((with.cost - base.cost).abs() < 1e-3 * base.cost, "{} vs {}", with.cost, base.cost);
    }

    #[test]
    fn uptime_single_stage_matches_reported_cost() {
        let spec = tank();
        let sol = solve_sto(&spec, &seq(&[[0.0, 1.0]]), &StoSetup::uniform(1, 300, 0.5, FREE), &SolverOptions::default(), None).unwrap();
        assert!((sol.cost - 19.406).abs() <= 0.02 * 19.406, "cost {}", sol.cost);
    }

    #[test]
    fn report_round_trip() {
        let spec = tank();
        let sol = solve_sto(&spec, &seq(&[[0.0, 1.0]]), &StoSetup::uniform(1, 20, 0.5, FREE), &SolverOptions::default(), None).unwrap();
        let rep = sol.report();
        let mut buf = Vec::new();
        rep.write_json(&mut buf).unwrap();
        assert_eq!(StoReport::read_json(buf.as_slice()).unwrap(), rep);
        assert_eq!(rep.sequence, vec![vec![0.0, 1.0]]);
    }

    #[test]
    fn execution_modes_agree_bitwise() {
        let spec = tank();
        let s = seq(&[[1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]);
        let setup = StoSetup::uniform(3, 40, 0.5, FREE);
        let run = |execution| {
            solve_sto(&spec, &s, &setup, &SolverOptions { execution, ..SolverOptions::default() }, None).unwrap()
        };
        let (a, b) = (run(Execution::Sequential), run(Execution::Parallel));
        assert_eq!(a.nlp.z, b.nlp.z);
        assert_eq!(a.report(), b.report());
    }
}
