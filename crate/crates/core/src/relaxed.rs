//! Direct multiple shooting transcription of the relaxed problem.
//!
//! Layout of the decision vector for `N` nodes:
//!
//! ```text
//!   [ x_0 .. x_{N-1} | u_0 .. u_{N-2} | c_0 .. c_{N-2} ]
//! ```
//!
//! with states on nodes and (relaxed) discrete and continuous inputs on
//! intervals. The equalities are `x_0 = x0` followed by the explicit Euler
//! matching conditions `x_{k+1} = x_k + h f(x_k, u_k, c_k, t_k)`; the
//! objective is the left-endpoint quadrature of the stage cost plus the
//! terminal cost.

use crate::cia::RelaxedGrid;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{uniform_grid, ProblemSpec, RhsJacobians, StageCostGradient, Trajectory};
use crate::nlp::{self, NlpProblem, NlpSolution, SolverOptions, SparseMatrix};

/// Intervals per parallel work item; fixed so results do not depend on
/// the execution mode.
pub(crate) const CHUNK: usize = 32;

pub const DEFAULT_NODES: usize = 300;

#[derive(Debug, Clone)]
pub struct RelaxedTranscription {
    spec: ProblemSpec,
    nodes: usize,
    step: f64,
    times: Vec<f64>,
    /// Convex (box) hull of the discrete value set, per component.
    hull: Vec<[f64; 2]>,
    exec: Execution,
}

impl RelaxedTranscription {
    pub fn new(spec: &ProblemSpec, nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 nodes, got {nodes}")));
        }
        spec.validate()?;
        if spec.dynamics.path_constraint_count() > 0 {
            return Err(Error::InvalidArgument(
                "path constraints are not supported by the Euler transcriptions".into(),
            ));
        }
        let hull = (0..spec.discrete_dim)
            .map(|i| {
                let vals = spec.discrete_values.iter().map(|v| v[i]);
                [vals.clone().fold(f64::INFINITY, f64::min), vals.fold(f64::NEG_INFINITY, f64::max)]
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            nodes,
            step: spec.duration() / (nodes - 1) as f64,
            times: uniform_grid(spec.t0, spec.tf, nodes),
            hull,
            exec: Execution::default(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn intervals(&self) -> usize {
        self.nodes - 1
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    fn nx(&self) -> usize {
        self.spec.state_dim
    }
    fn nu(&self) -> usize {
        self.spec.discrete_dim
    }
    fn nc(&self) -> usize {
        self.spec.continuous_dim
    }

    pub fn state_index(&self, k: usize) -> usize {
        k * self.nx()
    }

    pub fn discrete_index(&self, k: usize) -> usize {
        self.nodes * self.nx() + k * self.nu()
    }

    pub fn continuous_index(&self, k: usize) -> usize {
        self.nodes * self.nx() + self.intervals() * self.nu() + k * self.nc()
    }

    fn slices<'a>(&self, z: &'a [f64], k: usize) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (xi, ui, ci) = (self.state_index(k), self.discrete_index(k), self.continuous_index(k));
        (&z[xi..xi + self.nx()], &z[ui..ui + self.nu()], &z[ci..ci + self.nc()])
    }

    /// Splits a decision vector into a trajectory. The running cost is the
    /// transcription's own quadrature.
    pub fn unpack(&self, z: &[f64]) -> Trajectory {
        let dynamics = &self.spec.dynamics;
        let mut running = Vec::with_capacity(self.nodes);
        running.push(0.0);
        for k in 0..self.intervals() {
            let (x, u, c) = self.slices(z, k);
            let l = dynamics.stage_cost(x, u, c, self.times[k]);
            running.push(running[k] + self.step * l);
        }
        let xi = self.state_index(self.nodes - 1);
        let terminal_cost = dynamics.terminal_cost(&z[xi..xi + self.nx()]);
        Trajectory {
            times: self.times.clone(),
            states: (0..self.nodes).map(|k| self.state_at(z, k).to_vec()).collect(),
            discrete: (0..self.intervals()).map(|k| self.slices(z, k).1.to_vec()).collect(),
            continuous: (0..self.intervals()).map(|k| self.slices(z, k).2.to_vec()).collect(),
            running_cost: running,
            terminal_cost,
        }
    }

    fn state_at<'a>(&self, z: &'a [f64], k: usize) -> &'a [f64] {
        let i = self.state_index(k);
        &z[i..i + self.nx()]
    }
}

impl NlpProblem for RelaxedTranscription {
    fn num_variables(&self) -> usize {
        self.nodes * self.nx() + self.intervals() * (self.nu() + self.nc())
    }

    fn num_constraints(&self) -> usize {
        self.nodes * self.nx()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_variables();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for k in 0..self.intervals() {
            for (i, b) in self.hull.iter().enumerate() {
                lo[self.discrete_index(k) + i] = b[0];
                hi[self.discrete_index(k) + i] = b[1];
            }
            for (i, b) in self.spec.continuous_bounds.iter().enumerate() {
                lo[self.continuous_index(k) + i] = b[0];
                hi[self.continuous_index(k) + i] = b[1];
            }
        }
        (lo, hi)
    }

    /// States held at `x0`, discrete inputs at the hull midpoint, continuous
    /// inputs at the midpoint of their bounds.
    fn initial_guess(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.num_variables()];
        for k in 0..self.nodes {
            let i = self.state_index(k);
            z[i..i + self.nx()].copy_from_slice(&self.spec.x0);
        }
        for k in 0..self.intervals() {
            for (i, b) in self.hull.iter().enumerate() {
                z[self.discrete_index(k) + i] = 0.5 * (b[0] + b[1]);
            }
            for (i, b) in self.spec.continuous_bounds.iter().enumerate() {
                z[self.continuous_index(k) + i] = 0.5 * (b[0] + b[1]);
            }
        }
        z
    }

    fn objective(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let (nx, nu, nc) = (self.nx(), self.nu(), self.nc());
        let dynamics = &self.spec.dynamics;
        let intervals = self.intervals();
        let chunks = intervals.div_ceil(CHUNK);
        // (cost, per-interval [dL/dx, dL/du, dL/dc] scaled by h)
        let parts = self.exec.map_indexed(chunks, |ci| {
            let mut sum = 0.0;
            let mut local = Vec::with_capacity(CHUNK * (nx + nu + nc));
            let mut g = StageCostGradient::zeros(nx, nu, nc);
            for k in ci * CHUNK..((ci + 1) * CHUNK).min(intervals) {
                let (x, u, c) = self.slices(z, k);
                let t = self.times[k];
                sum += self.step * dynamics.stage_cost(x, u, c, t);
                dynamics.stage_cost_gradient(x, u, c, t, &mut g);
                local.extend(g.dx.iter().chain(&g.du).chain(&g.dc).map(|v| self.step * v));
            }
            (sum, local)
        });
        grad.fill(0.0);
        let mut total = 0.0;
        for (ci, (sum, local)) in parts.into_iter().enumerate() {
            total += sum;
            for (j, block) in local.chunks(nx + nu + nc).enumerate() {
                let k = ci * CHUNK + j;
                grad[self.state_index(k)..][..nx].copy_from_slice(&block[..nx]);
                grad[self.discrete_index(k)..][..nu].copy_from_slice(&block[nx..nx + nu]);
                grad[self.continuous_index(k)..][..nc].copy_from_slice(&block[nx + nu..]);
            }
        }
        let last = self.state_at(z, self.nodes - 1);
        total += dynamics.terminal_cost(last);
        let mut tg = vec![0.0; nx];
        dynamics.terminal_cost_gradient(last, &mut tg);
        for (i, v) in tg.into_iter().enumerate() {
            grad[self.state_index(self.nodes - 1) + i] += v;
        }
        total
    }

    fn constraints(&self, z: &[f64], out: &mut [f64]) {
        let nx = self.nx();
        for i in 0..nx {
            out[i] = z[i] - self.spec.x0[i];
        }
        let intervals = self.intervals();
        self.exec.for_each_chunk_mut(&mut out[nx..], CHUNK * nx, |ci, rows| {
            let mut f = vec![0.0; nx];
            for (j, row) in rows.chunks_mut(nx).enumerate() {
                let k = ci * CHUNK + j;
                debug_assert!(k < intervals);
                let (x, u, c) = self.slices(z, k);
                self.spec.dynamics.rhs(x, u, c, self.times[k], &mut f);
                let next = self.state_at(z, k + 1);
                for i in 0..nx {
                    row[i] = next[i] - x[i] - self.step * f[i];
                }
            }
        });
    }

    fn jacobian(&self, z: &[f64]) -> SparseMatrix {
        let (nx, nu, nc) = (self.nx(), self.nu(), self.nc());
        let intervals = self.intervals();
        let per_interval = nx * (1 + nx + nu + nc);
        let mut jac = SparseMatrix::with_capacity(self.num_constraints(), self.num_variables(), nx + intervals * per_interval);
        for i in 0..nx {
            jac.push(i, i, 1.0);
        }
        let chunks = intervals.div_ceil(CHUNK);
        let blocks = self.exec.map_indexed(chunks, |ci| {
            let mut entries = Vec::with_capacity(CHUNK * per_interval);
            let mut d = RhsJacobians::zeros(nx, nu, nc);
            for k in ci * CHUNK..((ci + 1) * CHUNK).min(intervals) {
                let (x, u, c) = self.slices(z, k);
                self.spec.dynamics.rhs_jacobians(x, u, c, self.times[k], &mut d);
                let row0 = nx + k * nx;
                for i in 0..nx {
                    let row = row0 + i;
                    entries.push((row, self.state_index(k + 1) + i, 1.0));
                    for j in 0..nx {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        entries.push((row, self.state_index(k) + j, -delta - self.step * d.dx[i * nx + j]));
                    }
                    for j in 0..nu {
                        entries.push((row, self.discrete_index(k) + j, -self.step * d.du[i * nu + j]));
                    }
                    for j in 0..nc {
                        entries.push((row, self.continuous_index(k) + j, -self.step * d.dc[i * nc + j]));
                    }
                }
            }
            entries
        });
        for (r, c, v) in blocks.into_iter().flatten() {
            jac.push(r, c, v);
        }
        jac
    }

    fn objective_coupling(&self) -> Option<Vec<(usize, usize)>> {
        // stage costs share the matching rows of their interval; only the
        // terminal cost couples the last node's states among themselves
        let last = self.state_index(self.nodes - 1);
        let nx = self.nx();
        Some((0..nx).flat_map(|i| (0..i).map(move |j| (last + i, last + j))).collect())
    }
}

/// Output of [`solve_relaxed`].
#[derive(Debug, Clone)]
pub struct RelaxedSolution {
    pub trajectory: Trajectory,
    pub objective_value: f64,
    pub control_grid: RelaxedGrid,
    pub nlp: NlpSolution,
}

pub fn transcribe_relaxed(spec: &ProblemSpec, nodes: usize) -> Result<RelaxedTranscription> {
    RelaxedTranscription::new(spec, nodes)
}

/// Transcribes and solves the relaxed problem on `nodes` uniform nodes.
pub fn solve_relaxed(spec: &ProblemSpec, nodes: usize, opts: &SolverOptions) -> Result<RelaxedSolution> {
    let tr = RelaxedTranscription::new(spec, nodes)?.with_execution(opts.execution);
    let sol = nlp::solve(&tr, opts)?;
    if !sol.is_converged() {
        return Err(Error::NotConverged {
            status: sol.status,
            iterations: sol.iterations,
            solution: Box::new(sol),
        });
    }
    let trajectory = tr.unpack(&sol.z);
    let control_grid = RelaxedGrid {
        intervals: trajectory.times.windows(2).map(|w| [w[0], w[1]]).collect(),
        values: trajectory.discrete.clone(),
    };
    Ok(RelaxedSolution {
        objective_value: sol.objective_value,
        trajectory,
        control_grid,
        nlp: sol,
    })
}
