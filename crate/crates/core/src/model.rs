//! Switched optimal control problems, the Double Tank reference instance,
//! explicit Euler integration and cost evaluation.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Floor used by the smoothed square root `sqrt(max(x, SQRT_FLOOR))`.
pub const SQRT_FLOOR: f64 = 1e-8;

/// Partial derivatives of the right-hand side `f(x, u, c, t)`.
///
/// Matrices are row-major with `state_dim` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RhsJacobians {
    pub dx: Vec<f64>,
    pub du: Vec<f64>,
    pub dc: Vec<f64>,
    pub dt: Vec<f64>,
}

impl RhsJacobians {
    pub fn zeros(nx: usize, nu: usize, nc: usize) -> Self {
        Self {
            dx: vec![0.0; nx * nx],
            du: vec![0.0; nx * nu],
            dc: vec![0.0; nx * nc],
            dt: vec![0.0; nx],
        }
    }
}

/// Gradient of the stage cost `L(x, u, c, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCostGradient {
    pub dx: Vec<f64>,
    pub du: Vec<f64>,
    pub dc: Vec<f64>,
    pub dt: f64,
}

impl StageCostGradient {
    pub fn zeros(nx: usize, nu: usize, nc: usize) -> Self {
        Self {
            dx: vec![0.0; nx],
            du: vec![0.0; nu],
            dc: vec![0.0; nc],
            dt: 0.0,
        }
    }
}

/// Model callbacks of a switched system.
///
/// `u` is the discrete input (relaxed to its convex hull where a
/// transcription needs it) and `c` the continuous input. Implementations
/// must be pure so transcriptions can evaluate them from several threads.
pub trait SwitchedDynamics: Send + Sync + fmt::Debug {
    fn rhs(&self, x: &[f64], u: &[f64], c: &[f64], t: f64, dx: &mut [f64]);

    fn rhs_jacobians(&self, x: &[f64], u: &[f64], c: &[f64], t: f64, jac: &mut RhsJacobians);

    fn stage_cost(&self, x: &[f64], u: &[f64], c: &[f64], t: f64) -> f64;

    fn stage_cost_gradient(
        &self,
        x: &[f64],
        u: &[f64],
        c: &[f64],
        t: f64,
        grad: &mut StageCostGradient,
    );

    fn terminal_cost(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn terminal_cost_gradient(&self, _x: &[f64], grad: &mut [f64]) {
        grad.fill(0.0);
    }

    /// Number of path constraints `h(x, u, c, t) <= 0`.
    fn path_constraint_count(&self) -> usize {
        0
    }

    fn path_constraints(&self, _x: &[f64], _u: &[f64], _c: &[f64], _t: f64, _out: &mut [f64]) {}

    /// Maps the optimized continuous inputs to the full physical input
    /// vector used in exports (e.g. re-inserting inputs fixed by the model).
    fn expand_continuous(&self, c: &[f64]) -> Vec<f64> {
        c.to_vec()
    }

    /// Inverse of [`SwitchedDynamics::expand_continuous`].
    fn reduce_continuous(&self, full: &[f64]) -> Vec<f64> {
        full.to_vec()
    }
}

/// Column labels used by trajectory exports.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub states: Vec<String>,
    pub discrete: Vec<String>,
    /// Labels of the *expanded* continuous inputs.
    pub continuous: Vec<String>,
}

/// A switched optimal control problem on a fixed horizon.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub state_dim: usize,
    pub discrete_dim: usize,
    pub continuous_dim: usize,
    pub continuous_bounds: Vec<[f64; 2]>,
    pub discrete_values: Vec<Vec<f64>>,
    pub t0: f64,
    pub tf: f64,
    pub x0: Vec<f64>,
    pub labels: Labels,
    pub dynamics: Arc<dyn SwitchedDynamics>,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.tf.is_finite() && self.tf > self.t0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must satisfy tf > t0 (t0 = {}, tf = {})",
                self.t0, self.tf
            )));
        }
        if self.x0.len() != self.state_dim || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("x0 must be finite with state_dim entries".into()));
        }
        if self.continuous_bounds.len() != self.continuous_dim {
            return Err(Error::InvalidArgument("one bound pair per continuous input".into()));
        }
        if let Some(b) = self.continuous_bounds.iter().find(|b| !(b[0] <= b[1])) {
            return Err(Error::InvalidArgument(format!("bounds {b:?} have lower > upper")));
        }
        if self.discrete_values.is_empty() {
            return Err(Error::InvalidArgument("discrete value set is empty".into()));
        }
        if self.discrete_values.iter().any(|v| v.len() != self.discrete_dim) {
            return Err(Error::InvalidArgument("discrete value has wrong dimension".into()));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.tf - self.t0
    }

    pub fn is_admissible_discrete(&self, u: &[f64]) -> bool {
        self.discrete_values.iter().any(|v| v.as_slice() == u)
    }

    pub fn rhs(&self, x: &[f64], u: &[f64], c: &[f64], t: f64) -> Vec<f64> {
        let mut dx = vec![0.0; self.state_dim];
        self.dynamics.rhs(x, u, c, t, &mut dx);
        dx
    }
}

/// Constants of the Double Tank instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleTankParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub tf: f64,
    pub x0: [f64; 2],
}

impl Default for DoubleTankParams {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta1: 1.0,
            beta2: 1.1,
            gamma: 10.0,
            tf: 10.0,
            x0: [2.0, 2.5],
        }
    }
}

impl DoubleTankParams {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected, missing keys keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut p = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            if !p.set(key, value.trim())? {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    /// Sets one constant by name. Returns `false` for keys that are not
    /// Double Tank constants.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("'{key}': cannot parse '{v}' as a number")))
        };
        match key {
            "alpha" => self.alpha = parse(value)?,
            "beta1" => self.beta1 = parse(value)?,
            "beta2" => self.beta2 = parse(value)?,
            "gamma" => self.gamma = parse(value)?,
            "tf" => self.tf = parse(value)?,
            "x1_0" => self.x0[0] = parse(value)?,
            "x2_0" => self.x0[1] = parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta1, self.beta2, self.gamma, self.tf, self.x0[0], self.x0[1]];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("all constants must be finite".into()));
        }
        if self.tf <= 0.0 {
            return Err(Error::Config(format!("tf must be positive, got {}", self.tf)));
        }
        if self.gamma < 0.0 || self.alpha < 0.0 || self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(Error::Config("alpha, beta1, beta2 and gamma must be non-negative".into()));
        }
        if self.x0[0] < 0.0 || self.x0[1] < 0.0 {
            return Err(Error::Config("initial tank levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Builds the problem. The fixed flow `c1 = gamma` is substituted, so
    /// the only continuous decision is `c2 in [0, gamma]`.
    pub fn problem(&self) -> ProblemSpec {
        ProblemSpec {
            state_dim: 2,
            discrete_dim: 2,
            continuous_dim: 1,
            continuous_bounds: vec![[0.0, self.gamma]],
            discrete_values: vec![
                vec![0.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0],
                vec![1.0, 1.0],
            ],
            t0: 0.0,
            tf: self.tf,
            x0: self.x0.to_vec(),
            labels: Labels {
                states: vec!["x1".into(), "x2".into()],
                discrete: vec!["u1".into(), "u2".into()],
                continuous: vec!["c1".into(), "c2".into()],
            },
            dynamics: Arc::new(DoubleTank { params: *self }),
        }
    }
}

/// Tracking reference for the second tank level.
pub fn reference(t: f64) -> f64 {
    2.0 + 0.5 * t.sin()
}

fn reference_rate(t: f64) -> f64 {
    0.5 * t.cos()
}

/// `sqrt(max(x, SQRT_FLOOR))`.
pub fn smooth_sqrt(x: f64) -> f64 {
    x.max(SQRT_FLOOR).sqrt()
}

/// Derivative of [`smooth_sqrt`]; zero below the floor.
pub fn smooth_sqrt_deriv(x: f64) -> f64 {
    if x > SQRT_FLOOR {
        0.5 / x.sqrt()
    } else {
        0.0
    }
}

/// Two-tank dynamics with flows `c = (c1, c2)` through the valves `u`.
pub fn double_tank_rhs(x: [f64; 2], u: [f64; 2], c: [f64; 2]) -> Result<[f64; 2]> {
    if x.iter().chain(&u).chain(&c).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("double tank rhs needs finite inputs".into()));
    }
    let s1 = smooth_sqrt(x[0]);
    let s2 = smooth_sqrt(x[1]);
    Ok([u[0] * c[0] + u[1] * c[1] - s1, s1 - s2])
}

/// The Double Tank model with `c1` fixed to `gamma`.
#[derive(Debug, Clone)]
pub struct DoubleTank {
    pub params: DoubleTankParams,
}

impl SwitchedDynamics for DoubleTank {
    fn rhs(&self, x: &[f64], u: &[f64], c: &[f64], _t: f64, dx: &mut [f64]) {
        let s1 = smooth_sqrt(x[0]);
        let s2 = smooth_sqrt(x[1]);
        dx[0] = u[0] * self.params.gamma + u[1] * c[0] - s1;
        dx[1] = s1 - s2;
    }

    fn rhs_jacobians(&self, x: &[f64], u: &[f64], c: &[f64], _t: f64, jac: &mut RhsJacobians) {
        let d1 = smooth_sqrt_deriv(x[0]);
        let d2 = smooth_sqrt_deriv(x[1]);
        jac.dx.copy_from_slice(&[-d1, 0.0, d1, -d2]);
        jac.du.copy_from_slice(&[self.params.gamma, c[0], 0.0, 0.0]);
        jac.dc.copy_from_slice(&[u[1], 0.0]);
        jac.dt.fill(0.0);
    }

    fn stage_cost(&self, x: &[f64], u: &[f64], c: &[f64], t: f64) -> f64 {
        let p = &self.params;
        let e = x[1] - reference(t);
        p.alpha * e * e + p.beta1 * u[0] * p.gamma + p.beta2 * u[1] * c[0]
    }

    fn stage_cost_gradient(
        &self,
        x: &[f64],
        u: &[f64],
        c: &[f64],
        t: f64,
        grad: &mut StageCostGradient,
    ) {
        let p = &self.params;
        let e = x[1] - reference(t);
        grad.dx[0] = 0.0;
        grad.dx[1] = 2.0 * p.alpha * e;
        grad.du[0] = p.beta1 * p.gamma;
        grad.du[1] = p.beta2 * c[0];
        grad.dc[0] = p.beta2 * u[1];
        grad.dt = -2.0 * p.alpha * e * reference_rate(t);
    }

    fn expand_continuous(&self, c: &[f64]) -> Vec<f64> {
        vec![self.params.gamma, c[0]]
    }

    fn reduce_continuous(&self, full: &[f64]) -> Vec<f64> {
        vec![full[1]]
    }
}

/// One explicit Euler step `x + h f(x, u, c, t)`.
pub fn euler_step(
    spec: &ProblemSpec,
    x: &[f64],
    u: &[f64],
    c: &[f64],
    t: f64,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Precondition(format!("step size must be positive, got {h}")));
    }
    let mut next = spec.rhs(x, u, c, t);
    for (n, xi) in next.iter_mut().zip(x) {
        *n = xi + h * *n;
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationFailure { node: 0, time: t });
    }
    Ok(next)
}

/// Piecewise-constant inputs on a time grid: `times` holds the nodes and
/// the input vectors are given per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSchedule {
    pub times: Vec<f64>,
    pub discrete: Vec<Vec<f64>>,
    pub continuous: Vec<Vec<f64>>,
}

impl ControlSchedule {
    /// Uniform grid of `nodes` points over `[t0, tf]` with constant inputs.
    pub fn constant(t0: f64, tf: f64, nodes: usize, u: &[f64], c: &[f64]) -> Self {
        let times = uniform_grid(t0, tf, nodes);
        let intervals = nodes.saturating_sub(1);
        Self {
            times,
            discrete: vec![u.to_vec(); intervals],
            continuous: vec![c.to_vec(); intervals],
        }
    }

    pub fn intervals(&self) -> usize {
        self.times.len().saturating_sub(1)
    }
}

/// `n` equally spaced points from `t0` to `tf` (inclusive).
pub fn uniform_grid(t0: f64, tf: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![t0],
        _ => {
            let h = (tf - t0) / (n - 1) as f64;
            (0..n)
                .map(|k| if k + 1 == n { tf } else { t0 + h * k as f64 })
                .collect()
        }
    }
}

/// A simulated (or optimized) trajectory: states and accumulated cost per
/// node, inputs per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub discrete: Vec<Vec<f64>>,
    pub continuous: Vec<Vec<f64>>,
    pub running_cost: Vec<f64>,
    pub terminal_cost: f64,
}

impl Trajectory {
    pub fn total_cost(&self) -> f64 {
        self.running_cost.last().copied().unwrap_or(0.0) + self.terminal_cost
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn check_consistent(&self) -> Result<()> {
        let n = self.times.len();
        let ok = n > 0
            && self.states.len() == n
            && self.running_cost.len() == n
            && self.discrete.len() == n - 1
            && self.continuous.len() == n - 1
            && self.times.windows(2).all(|w| w[1] >= w[0]);
        if ok {
            Ok(())
        } else {
            Err(Error::Malformed("trajectory lengths or time grid inconsistent".into()))
        }
    }

    /// Writes one row per node; interval inputs go on the row of the
    /// interval's left node and the last node repeats the final interval.
    pub fn write_csv<W: std::io::Write>(&self, spec: &ProblemSpec, out: W) -> Result<()> {
        self.check_consistent()?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(spec.labels.states.iter().cloned());
        header.extend(spec.labels.discrete.iter().cloned());
        header.extend(spec.labels.continuous.iter().cloned());
        header.push("running_cost".into());
        w.write_record(&header)?;
        let n = self.times.len();
        for k in 0..n {
            let j = k.min(n.saturating_sub(2));
            let mut row = vec![fmt_f64(self.times[k])];
            row.extend(self.states[k].iter().map(|v| fmt_f64(*v)));
            if n > 1 {
                row.extend(self.discrete[j].iter().map(|v| fmt_f64(*v)));
                let full = spec.dynamics.expand_continuous(&self.continuous[j]);
                row.extend(full.iter().map(|v| fmt_f64(*v)));
            } else {
                row.extend(std::iter::repeat_n(String::new(), spec.discrete_dim));
                row.extend(std::iter::repeat_n(String::new(), spec.labels.continuous.len()));
            }
            row.push(fmt_f64(self.running_cost[k]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl Trajectory {
    /// Reads the layout written by [`Trajectory::write_csv`]. The terminal
    /// cost is recomputed from the last state.
    pub fn read_csv<R: std::io::Read>(spec: &ProblemSpec, input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut expected = vec!["t".to_string()];
        expected.extend(spec.labels.states.iter().cloned());
        expected.extend(spec.labels.discrete.iter().cloned());
        expected.extend(spec.labels.continuous.iter().cloned());
        expected.push("running_cost".into());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != expected {
            return Err(Error::Malformed(format!("trajectory header {header:?}, expected {expected:?}")));
        }
        let (nx, nu) = (spec.state_dim, spec.discrete_dim);
        let mut traj = Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            discrete: Vec::new(),
            continuous: Vec::new(),
            running_cost: Vec::new(),
            terminal_cost: 0.0,
        };
        let mut inputs = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| -> Result<Option<f64>> {
                let v = rec.get(i).unwrap_or("").trim();
                if v.is_empty() {
                    return Ok(None);
                }
                v.parse()
                    .map(Some)
                    .map_err(|_| Error::Malformed(format!("row {}: bad number '{v}'", line + 1)))
            };
            let need = |i: usize| field(i)?.ok_or_else(|| Error::Malformed(format!("row {}: empty field", line + 1)));
            traj.times.push(need(0)?);
            traj.states.push((1..=nx).map(need).collect::<Result<_>>()?);
            let rest: Vec<Option<f64>> = (1 + nx..expected.len() - 1).map(field).collect::<Result<_>>()?;
            inputs.push(rest);
            traj.running_cost.push(need(expected.len() - 1)?);
        }
        let n = traj.times.len();
        for row in inputs.into_iter().take(n.saturating_sub(1)) {
            let row: Vec<f64> = row
                .into_iter()
                .map(|v| v.ok_or_else(|| Error::Malformed("missing input value".into())))
                .collect::<Result<_>>()?;
            traj.discrete.push(row[..nu].to_vec());
            traj.continuous.push(spec.dynamics.reduce_continuous(&row[nu..]));
        }
        traj.check_consistent()?;
        traj.terminal_cost = spec.dynamics.terminal_cost(traj.final_state());
        Ok(traj)
    }
}

/// Shortest round-tripping decimal representation.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Forward Euler rollout on the schedule's grid with left-endpoint
/// quadrature of the stage cost.
pub fn simulate(spec: &ProblemSpec, controls: &ControlSchedule, x0: &[f64]) -> Result<Trajectory> {
    let n = controls.times.len();
    if n == 0 {
        return Err(Error::InvalidArgument("control grid has no nodes".into()));
    }
    if controls.discrete.len() != n - 1 || controls.continuous.len() != n - 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} interval inputs, got {} discrete / {} continuous",
            n - 1,
            controls.discrete.len(),
            controls.continuous.len()
        )));
    }
    if x0.len() != spec.state_dim {
        return Err(Error::InvalidArgument("x0 has wrong dimension".into()));
    }
    let mut states = Vec::with_capacity(n);
    let mut running = Vec::with_capacity(n);
    states.push(x0.to_vec());
    running.push(0.0);
    let mut dx = vec![0.0; spec.state_dim];
    for k in 0..n - 1 {
        let (t, h) = (controls.times[k], controls.times[k + 1] - controls.times[k]);
        if h < 0.0 {
            return Err(Error::InvalidArgument("time grid must be non-decreasing".into()));
        }
        let (x, u, c) = (&states[k], &controls.discrete[k], &controls.continuous[k]);
        spec.dynamics.rhs(x, u, c, t, &mut dx);
        let l = spec.dynamics.stage_cost(x, u, c, t);
        let next: Vec<f64> = x.iter().zip(&dx).map(|(xi, di)| xi + h * di).collect();
        let acc = running[k] + h * l;
        if next.iter().any(|v| !v.is_finite()) || !acc.is_finite() {
            return Err(Error::IntegrationFailure { node: k, time: t });
        }
        states.push(next);
        running.push(acc);
    }
    let terminal_cost = spec.dynamics.terminal_cost(&states[n - 1]);
    Ok(Trajectory {
        times: controls.times.clone(),
        states,
        discrete: controls.discrete.clone(),
        continuous: controls.continuous.clone(),
        running_cost: running,
        terminal_cost,
    })
}
