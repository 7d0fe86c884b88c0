//! Smooth nonlinear programs with equality constraints and variable bounds.
//!
//! ```text
//!   minimize    f(z)
//!   subject to  g(z) = 0
//!               lower <= z <= upper
//! ```
//!
//! [`solve`] runs an augmented Lagrangian outer loop on the equalities. The
//! bound-constrained subproblems are minimized by a projected Newton method
//! with a sparse finite-difference Hessian, or by projected limited-memory
//! BFGS. [`check_derivatives`] compares the analytic gradient and
//! Jacobian of a problem against central differences.

mod auglag;
mod check;
mod hessian;
mod lbfgsb;
mod newton;
mod skyline;
mod sparse;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exec::Execution;

pub use auglag::{solve, solve_from};
pub use check::{check_derivatives, relative_error, DerivativeKind, DerivativeReport, FlaggedEntry, FLAG_THRESHOLD};
pub use sparse::SparseMatrix;

/// A finite-dimensional program `min f(z) s.t. g(z) = 0, lower <= z <= upper`.
///
/// Implementations must be safe to evaluate from several threads at once.
pub trait NlpProblem: Sync {
    fn num_variables(&self) -> usize;

    fn num_constraints(&self) -> usize;

    /// Lower and upper variable bounds; infinite entries are allowed.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);

    fn initial_guess(&self) -> Vec<f64>;

    /// Objective value; writes the gradient into `grad`.
    fn objective(&self, z: &[f64], grad: &mut [f64]) -> f64;

    /// Equality constraint residuals `g(z)`.
    fn constraints(&self, z: &[f64], out: &mut [f64]);

    /// Sparse Jacobian of `g` at `z`. The sparsity pattern must not depend
    /// on `z`.
    fn jacobian(&self, z: &[f64]) -> SparseMatrix;

    /// Pairs of variables coupled by the objective Hessian that do not
    /// already share a constraint row. The Newton inner solver combines
    /// these with the Jacobian pattern; `None` (the default) makes it treat
    /// the Hessian as dense.
    fn objective_coupling(&self) -> Option<Vec<(usize, usize)>> {
        None
    }
}

/// Closure-backed problem, handy for small programs and tests.
pub struct FnProblem<F, G, J>
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
    G: Fn(&[f64], &mut [f64]) + Sync,
    J: Fn(&[f64]) -> SparseMatrix + Sync,
{
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub x0: Vec<f64>,
    pub num_constraints: usize,
    pub objective: F,
    pub constraints: G,
    pub jacobian: J,
}

impl<F, G, J> NlpProblem for FnProblem<F, G, J>
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
    G: Fn(&[f64], &mut [f64]) + Sync,
    J: Fn(&[f64]) -> SparseMatrix + Sync,
{
    fn num_variables(&self) -> usize {
        self.x0.len()
    }
    fn num_constraints(&self) -> usize {
        self.num_constraints
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.clone(), self.upper.clone())
    }
    fn initial_guess(&self) -> Vec<f64> {
        self.x0.clone()
    }
    fn objective(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        (self.objective)(z, grad)
    }
    fn constraints(&self, z: &[f64], out: &mut [f64]) {
        (self.constraints)(z, out)
    }
    fn jacobian(&self, z: &[f64]) -> SparseMatrix {
        (self.jacobian)(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

/// Minimizer used on the bound-constrained subproblems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InnerMethod {
    #[default]
    Newton,
    Lbfgs,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Max-norm tolerance on the equality residual.
    pub tol_eq: f64,
    /// Max-norm tolerance on the projected Lagrangian gradient.
    pub tol_kkt: f64,
    /// Allowed bound violation of returned points.
    pub tol_bound: f64,
    pub max_outer_iterations: usize,
    /// Cap on the total number of inner iterations.
    pub max_iterations: usize,
    /// Cap on the inner iterations of one subproblem. Hitting it ends the
    /// subproblem early and moves on to the multiplier update.
    pub max_inner_iterations: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    /// Required shrink factor of the constraint norm between outer
    /// iterations; otherwise the penalty grows.
    pub required_decrease: f64,
    pub max_penalty: f64,
    pub inner: InnerMethod,
    /// Number of correction pairs kept by the L-BFGS inner solver.
    pub memory: usize,
    pub execution: Execution,
    /// Keep one [`IterationLogEntry`] per inner iteration.
    pub record_log: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_eq: 1e-7,
            tol_kkt: 1e-6,
            tol_bound: 1e-9,
            max_outer_iterations: 200,
            max_iterations: 200_000,
            max_inner_iterations: 5_000,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            required_decrease: 0.25,
            max_penalty: 1e8,
            inner: InnerMethod::default(),
            memory: 10,
            execution: Execution::default(),
            record_log: false,
        }
    }
}

/// Point and multipliers to resume from.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub z: Vec<f64>,
    /// Equality multipliers; zeros when absent.
    pub multipliers: Option<Vec<f64>>,
    pub penalty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLogEntry {
    pub outer: usize,
    pub iter: usize,
    pub objective: f64,
    /// Augmented Lagrangian value for the current outer iteration.
    pub merit: f64,
    pub eq_residual: f64,
    pub kkt_residual: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub z: Vec<f64>,
    pub objective_value: f64,
    /// Max-norm of `g(z)`.
    pub equality_residual_norm: f64,
    /// Max-norm of the projected Lagrangian gradient.
    pub kkt_residual: f64,
    /// Equality multipliers for the Lagrangian `f + multipliers . g`.
    pub multipliers: Vec<f64>,
    /// Non-negative multipliers of whichever bound is active, zero elsewhere.
    pub bound_multipliers: Vec<f64>,
    pub status: SolveStatus,
    /// Inner iterations across all outer iterations.
    pub iterations: usize,
    pub outer_iterations: usize,
    pub penalty: f64,
    pub log: Vec<IterationLogEntry>,
}

impl NlpSolution {
    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            z: self.z.clone(),
            multipliers: Some(self.multipliers.clone()),
            penalty: Some(self.penalty),
        }
    }

    /// Writes the iteration log as `iter,objective,eq_residual,kkt_residual,step_norm`.
    pub fn write_log_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "objective", "eq_residual", "kkt_residual", "step_norm"])?;
        for e in &self.log {
            w.write_record(&[
                e.iter.to_string(),
                crate::model::fmt_f64(e.objective),
                crate::model::fmt_f64(e.eq_residual),
                crate::model::fmt_f64(e.kkt_residual),
                crate::model::fmt_f64(e.step_norm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-norm of `P(z - g) - z`, the first-order optimality measure for a box.
pub(crate) fn projected_gradient_norm(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut m = 0.0_f64;
    for i in 0..z.len() {
        let p = (z[i] - g[i]).clamp(lo[i], hi[i]) - z[i];
        m = m.max(p.abs());
    }
    m
}
