//! Projected Newton method for bound-constrained minimization.
//!
//! Each iteration sends the epsilon-active variables (those near a bound
//! with the gradient pushing outward) to that bound, solves the reduced
//! Newton system on the free variables with a regularized sparse Cholesky
//! factor, and runs a projected Armijo search along `P(z + alpha d)`.

use super::lbfgsb::{InnerOutcome, InnerStatus, StepInfo, Subproblem};
use super::skyline::{Ordering, Skyline};
use super::{dot, inf_norm, projected_gradient_norm};

pub(crate) trait NewtonSubproblem: Subproblem {
    /// Assembles a symmetric Hessian approximation at `z` into `sky`
    /// (already zeroed, permuted numbering of [`Self::ordering`]).
    fn hessian(&mut self, z: &[f64], sky: &mut Skyline);

    fn ordering(&self) -> &Ordering;

    fn new_skyline(&self) -> Skyline;
}

pub(crate) struct ProjectedNewton<'a> {
    pub lower: &'a [f64],
    pub upper: &'a [f64],
    pub tol: f64,
    pub max_iterations: usize,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;
const PIVOT_TOL: f64 = 1e-8;
const MAX_REFIXES: usize = 4;

/// Regularization carried between iterations of one minimization.
struct Regularization {
    last: f64,
}

impl ProjectedNewton<'_> {
    pub fn minimize<F, H>(
        &self,
        fun: &mut F,
        z: &mut [f64],
        f: &mut f64,
        g: &mut [f64],
        mut on_step: H,
    ) -> InnerOutcome
    where
        F: NewtonSubproblem + ?Sized,
        H: FnMut(&StepInfo),
    {
        let n = z.len();
        let (lo, hi) = (self.lower, self.upper);
        let mut sky = fun.new_skyline();
        let mut factor = sky.clone();
        let mut reg = Regularization { last: 0.0 };
        let mut iterations = 0;
        let mut z_t = vec![0.0; n];
        let mut g_t = vec![0.0; n];
        let mut s = vec![0.0; n];
        let mut failures = 0;
        loop {
            let pg = projected_gradient_norm(z, g, lo, hi);
            if pg <= self.tol {
                return InnerOutcome { status: InnerStatus::Converged, iterations, value: *f, pg_norm: pg };
            }
            if iterations >= self.max_iterations {
                return InnerOutcome { status: InnerStatus::MaxIterations, iterations, value: *f, pg_norm: pg };
            }

            let eps = pg.min(1e-3);
            let active: Vec<bool> = (0..n)
                .map(|i| (z[i] <= lo[i] + eps && g[i] > 0.0) || (z[i] >= hi[i] - eps && g[i] < 0.0))
                .collect();

            sky.clear();
            fun.hessian(z, &mut sky);
            let mut fixed = vec![false; n];
            let mut d = None;
            if failures == 0 {
                // free variables sitting on a bound whose Newton component
                // points outward are held in place and the step recomputed
                for _ in 0..MAX_REFIXES {
                    let target: Vec<Option<f64>> = (0..n)
                        .map(|i| {
                            if active[i] {
                                Some(if g[i] > 0.0 { lo[i] } else { hi[i] })
                            } else if fixed[i] {
                                Some(if z[i] <= lo[i] + eps { lo[i] } else { hi[i] })
                            } else {
                                None
                            }
                        })
                        .collect();
                    let Some(dn) = self.newton_direction(fun.ordering(), &sky, &mut factor, &mut reg, z, g, &target)
                    else {
                        break;
                    };
                    let mut blocked = false;
                    for i in 0..n {
                        if !active[i] && !fixed[i]
                            && ((z[i] <= lo[i] + eps && dn[i] < 0.0) || (z[i] >= hi[i] - eps && dn[i] > 0.0))
                        {
                            fixed[i] = true;
                            blocked = true;
                        }
                    }
                    d = Some(dn);
                    if !blocked {
                        break;
                    }
                }
            }
            let d = match d {
                Some(d) if dot(g, &d) < 0.0 => d,
                _ => {
                    let scale = 1.0 / inf_norm(g).max(1.0);
                    g.iter().map(|gi| -gi * scale).collect()
                }
            };

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
                    if slope < 0.0 && f_t <= *f + ARMIJO * slope {
                        accepted = Some(f_t);
                        break;
                    }
                }
                alpha *= 0.5;
            }

            match accepted {
                Some(f_t) => {
                    log::trace!(
                        "newton {iterations}: f={f_t:.12e} pg={pg:.3e} alpha={alpha:.3e} delta={:.3e}",
                        reg.last
                    );
                    failures = 0;
                    let step_norm = inf_norm(&s);
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
                None if failures == 0 => failures += 1,
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

    fn newton_direction(
        &self,
        ord: &Ordering,
        sky: &Skyline,
        factor: &mut Skyline,
        reg: &mut Regularization,
        z: &[f64],
        g: &[f64],
        target: &[Option<f64>],
    ) -> Option<Vec<f64>> {
        let active: Vec<bool> = target.iter().map(Option::is_some).collect();
        let n = g.len();
        let perm = &ord.perm;
        let mut scale = 0.0_f64;
        let mut masked = sky.clone();
        for p in 0..n {
            let ap = active[perm[p]];
            let first = masked.first(p);
            let row = masked.row_mut(p);
            let last = row.len() - 1;
            if ap {
                row.fill(0.0);
                row[last] = 1.0;
                continue;
            }
            for (off, v) in row[..last].iter_mut().enumerate() {
                if active[perm[first + off]] {
                    *v = 0.0;
                }
            }
            scale = scale.max(row[last].abs());
        }
        let scale = scale.max(1.0);
        let delta_min = 1e-10 * scale;
        let delta_max = 1e6 * scale;
        let mut delta = if reg.last > 0.0 { (reg.last / 4.0).max(delta_min) } else { 0.0 };
        loop {
            factor.vals.copy_from_slice(&masked.vals);
            if delta > 0.0 {
                for p in 0..n {
                    if !active[perm[p]] {
                        factor.add_diag(p, delta);
                    }
                }
            }
            if factor.factor_with_pivot_tol(PIVOT_TOL) {
                break;
            }
            delta = if delta == 0.0 { delta_min.max(1e-8 * scale) } else { delta * 10.0 };
            if delta > delta_max {
                reg.last = 0.0;
                return None;
            }
        }
        reg.last = delta;
        // held variables move to their target bound; the free step accounts
        // for their coupling through the unmasked Hessian
        let held: Vec<f64> = (0..n).map(|p| target[perm[p]].map_or(0.0, |b| b - z[perm[p]])).collect();
        let mut coupling = vec![0.0; n];
        if held.iter().any(|&v| v != 0.0) {
            sky.mul_sym(&held, &mut coupling);
        }
        let mut rhs: Vec<f64> = (0..n)
            .map(|p| if active[perm[p]] { 0.0 } else { -g[perm[p]] - coupling[p] })
            .collect();
        factor.solve(&mut rhs);
        let mut d = vec![0.0; n];
        for p in 0..n {
            d[perm[p]] = if active[perm[p]] { held[p] } else { rhs[p] };
        }
        if d.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(d)
    }
}
