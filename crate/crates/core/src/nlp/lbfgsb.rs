//! Projected limited-memory BFGS for bound-constrained minimization.
//!
//! Variables within an epsilon of a bound whose gradient pushes outward form
//! the active set; they take a scaled gradient step (clamped by the
//! projection) while the free variables follow the two-loop L-BFGS direction
//! restricted to the free subspace. Steps are accepted by a projected Armijo
//! backtracking search.

use std::collections::VecDeque;

use super::{dot, inf_norm, projected_gradient_norm};

/// Smooth objective over a box, as seen by the inner solvers.
pub(crate) trait Subproblem {
    /// Value and gradient at `z`; `None` when either is not finite.
    fn value_grad(&mut self, z: &[f64], g: &mut [f64]) -> Option<f64>;
}

impl<F: FnMut(&[f64], &mut [f64]) -> Option<f64>> Subproblem for F {
    fn value_grad(&mut self, z: &[f64], g: &mut [f64]) -> Option<f64> {
        self(z, g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InnerStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub(crate) struct InnerOutcome {
    pub status: InnerStatus,
    pub iterations: usize,
    pub value: f64,
    pub pg_norm: f64,
}

/// Accepted step reported to the caller's log hook.
pub(crate) struct StepInfo {
    pub value: f64,
    pub pg_norm: f64,
    pub step_norm: f64,
}

struct Memory {
    cap: usize,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
}

impl Memory {
    fn new(cap: usize) -> Self {
        Self { cap, s: VecDeque::new(), y: VecDeque::new(), rho: VecDeque::new() }
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        let ss = dot(&s, &s);
        let yy = dot(&y, &y);
        // curvature condition; skip the pair otherwise
        if !(sy > 1e-12 * (ss * yy).sqrt()) || self.cap == 0 {
            return;
        }
        if self.s.len() == self.cap {
            self.s.pop_front();
            self.y.pop_front();
            self.rho.pop_front();
        }
        self.s.push_back(s);
        self.y.push_back(y);
        self.rho.push_back(1.0 / sy);
    }

    fn scaling(&self) -> f64 {
        match (self.s.back(), self.y.back()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0,
        }
    }

    /// `-H g` on the free components, `-gamma g` on the rest.
    fn direction(&self, g: &[f64], free: &[bool]) -> Vec<f64> {
        let n = g.len();
        let gamma = self.scaling();
        let mut q: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for j in (0..k).rev() {
            let a = self.rho[j] * dot(&self.s[j], &q);
            alpha[j] = a;
            let y = &self.y[j];
            for i in 0..n {
                if free[i] {
                    q[i] -= a * y[i];
                }
            }
        }
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for j in 0..k {
            let b = self.rho[j] * dot(&self.y[j], &q);
            let s = &self.s[j];
            for i in 0..n {
                if free[i] {
                    q[i] += (alpha[j] - b) * s[i];
                }
            }
        }
        (0..n)
            .map(|i| if free[i] { -q[i] } else { -gamma * g[i] })
            .collect()
    }
}

pub(crate) struct BoxMinimizer<'a> {
    pub lower: &'a [f64],
    pub upper: &'a [f64],
    pub memory: usize,
    pub tol: f64,
    pub max_iterations: usize,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

impl BoxMinimizer<'_> {
    /// Minimizes from `z` (which must lie in the box) given the value `f`
    /// and gradient `g` at `z`; all three are updated in place. `fun`
    /// returns `None` when the objective is not finite at the trial point.
    pub fn minimize<F, H>(
        &self,
        fun: &mut F,
        z: &mut [f64],
        f: &mut f64,
        g: &mut [f64],
        mut on_step: H,
    ) -> InnerOutcome
    where
        F: Subproblem + ?Sized,
        H: FnMut(&StepInfo),
    {
        let n = z.len();
        let (lo, hi) = (self.lower, self.upper);
        let mut mem = Memory::new(self.memory);
        let mut iterations = 0;
        let mut z_t = vec![0.0; n];
        let mut g_t = vec![0.0; n];
        let mut s = vec![0.0; n];
        loop {
            let pg = projected_gradient_norm(z, g, lo, hi);
            if pg <= self.tol {
                return InnerOutcome { status: InnerStatus::Converged, iterations, value: *f, pg_norm: pg };
            }
            if iterations >= self.max_iterations {
                return InnerOutcome { status: InnerStatus::MaxIterations, iterations, value: *f, pg_norm: pg };
            }

            let eps = pg.min(1e-3);
            let free: Vec<bool> = (0..n)
                .map(|i| !((z[i] <= lo[i] + eps && g[i] > 0.0) || (z[i] >= hi[i] - eps && g[i] < 0.0)))
                .collect();
            let mut d = if mem.is_empty() {
                // first step: unit max-norm steepest descent
                let scale = 1.0 / inf_norm(g).max(1.0);
                g.iter().map(|gi| -gi * scale).collect()
            } else {
                mem.direction(g, &free)
            };
            if !(dot(g, &d) < 0.0) {
                mem.clear();
                let scale = 1.0 / inf_norm(g).max(1.0);
                d = g.iter().map(|gi| -gi * scale).collect();
            }

            let mut accepted = None;
            let mut alpha = 1.0;
            for _ in 0..MAX_BACKTRACKS {
                for i in 0..n {
                    z_t[i] = (z[i] + alpha * d[i]).clamp(lo[i], hi[i]);
                    s[i] = z_t[i] - z[i];
                }
                if inf_norm(&s) == 0.0 {
                    break;
                }
                if let Some(f_t) = fun.value_grad(&z_t, &mut g_t) {
                    let slope = dot(g, &s);
                    if slope < 0.0 && f_t <= *f + ARMIJO * slope + 4.0 * f64::EPSILON * f.abs() {
                        accepted = Some(f_t);
                        break;
                    }
                }
                alpha *= 0.5;
            }

            match accepted {
                Some(f_t) => {
                    let y: Vec<f64> = (0..n).map(|i| g_t[i] - g[i]).collect();
                    let step_norm = inf_norm(&s);
                    mem.push(s.clone(), y);
                    z.copy_from_slice(&z_t);
                    g.copy_from_slice(&g_t);
                    *f = f_t;
                    iterations += 1;
                    on_step(&StepInfo {
                        value: f_t,
                        pg_norm: projected_gradient_norm(z, g, lo, hi),
                        step_norm,
                    });
                }
                None if !mem.is_empty() => mem.clear(),
                None => {
                    return InnerOutcome {
                        status: InnerStatus::LineSearchFailure,
                        iterations,
                        value: *f,
                        pg_norm: pg,
                    };
                }
            }
        }
    }
}
