use std::cell::Cell;

use log::debug;

use super::hessian::HessianStructure;
use super::lbfgsb::{BoxMinimizer, InnerStatus, StepInfo, Subproblem};
use super::newton::{NewtonSubproblem, ProjectedNewton};
use super::skyline::{Ordering, Skyline};
use super::{
    dot, inf_norm, projected_gradient_norm, InnerMethod, IterationLogEntry, NlpProblem, NlpSolution,
    SolveStatus, SolverOptions, WarmStart,
};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Solves `p` from its own initial guess.
pub fn solve<P: NlpProblem + ?Sized>(p: &P, opts: &SolverOptions) -> Result<NlpSolution> {
    solve_from(p, opts, None)
}

/// Augmented Lagrangian subproblem for fixed multipliers and penalty.
struct AlSubproblem<'a, P: ?Sized> {
    p: &'a P,
    upper: &'a [f64],
    y: Vec<f64>,
    rho: f64,
    exec: Execution,
    structure: Option<&'a HessianStructure>,
    last_obj: &'a Cell<f64>,
    last_cnorm: &'a Cell<f64>,
}

/// `grad f + J^T y` at `z`.
fn lagrangian_gradient<P: NlpProblem + ?Sized>(p: &P, z: &[f64], y: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; z.len()];
    p.objective(z, &mut g);
    let mut jt = vec![0.0; z.len()];
    p.jacobian(z).tmul_vec(y, &mut jt);
    for (a, b) in g.iter_mut().zip(&jt) {
        *a += b;
    }
    g
}

impl<P: NlpProblem + ?Sized> Subproblem for AlSubproblem<'_, P> {
    fn value_grad(&mut self, z: &[f64], grad: &mut [f64]) -> Option<f64> {
        let n = z.len();
        let m = self.y.len();
        let mut gf = vec![0.0; n];
        let mut c = vec![0.0; m];
        let f = self.p.objective(z, &mut gf);
        self.p.constraints(z, &mut c);
        if !f.is_finite() || c.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let shifted: Vec<f64> = (0..m).map(|j| self.y[j] + self.rho * c[j]).collect();
        self.p.jacobian(z).tmul_vec(&shifted, grad);
        for i in 0..n {
            grad[i] += gf[i];
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return None;
        }
        self.last_obj.set(f);
        self.last_cnorm.set(inf_norm(&c));
        Some(f + dot(&self.y, &c) + 0.5 * self.rho * dot(&c, &c))
    }
}

impl<P: NlpProblem + ?Sized> NewtonSubproblem for AlSubproblem<'_, P> {
    fn hessian(&mut self, z: &[f64], sky: &mut Skyline) {
        let hs = self.structure.expect("Newton subproblem without structure");
        let n = z.len();
        let m = self.y.len();
        let mut c = vec![0.0; m];
        self.p.constraints(z, &mut c);
        // curvature of the constraints weighted by the first-order estimate
        // of the multipliers; the Gauss-Newton part is added exactly
        let y_hat: Vec<f64> = (0..m).map(|j| self.y[j] + self.rho * c[j]).collect();
        let p = self.p;
        let g0 = lagrangian_gradient(p, z, &y_hat);
        let steps: Vec<f64> = (0..n)
            .map(|j| {
                let h = 1.5e-8 * (1.0 + z[j].abs());
                if z[j] + h > self.upper[j] {
                    -h
                } else {
                    h
                }
            })
            .collect();
        let diffs = self.exec.map_indexed(hs.colors.len(), |k| {
            let mut zp = z.to_vec();
            for &j in &hs.colors[k] {
                zp[j] += steps[j];
            }
            let g = lagrangian_gradient(p, &zp, &y_hat);
            g.iter().zip(&g0).map(|(a, b)| a - b).collect::<Vec<f64>>()
        });
        for (k, d) in diffs.iter().enumerate() {
            hs.add_color_estimate(k, &steps, d, sky);
        }
        if m > 0 {
            hs.add_jtj(&self.p.jacobian(z), self.rho, sky);
        }
    }

    fn ordering(&self) -> &Ordering {
        &self.structure.expect("Newton subproblem without structure").ordering
    }

    fn new_skyline(&self) -> Skyline {
        self.structure.expect("Newton subproblem without structure").skyline()
    }
}

/// Augmented Lagrangian method
///
/// ```text
///   L_A(z; y, rho) = f(z) + y . g(z) + rho/2 |g(z)|^2
/// ```
///
/// minimized over the box by the inner method of `opts`, followed by the
/// first-order multiplier update `y += rho g(z)`. The penalty grows by
/// `opts.penalty_growth` whenever `|g|_inf` fails to shrink by
/// `opts.required_decrease`.
pub fn solve_from<P: NlpProblem + ?Sized>(
    p: &P,
    opts: &SolverOptions,
    warm: Option<&WarmStart>,
) -> Result<NlpSolution> {
    let n = p.num_variables();
    let m = p.num_constraints();
    let (lo, hi) = p.bounds();
    if lo.len() != n || hi.len() != n {
        return Err(Error::InvalidArgument(format!("bounds must have {n} entries")));
    }
    if let Some(i) = (0..n).find(|&i| !(lo[i] <= hi[i])) {
        return Err(Error::InvalidArgument(format!("variable {i}: lower bound exceeds upper")));
    }

    let start = match warm {
        Some(w) => w.z.clone(),
        None => p.initial_guess(),
    };
    if start.len() != n {
        return Err(Error::InvalidArgument(format!("initial point must have {n} entries")));
    }
    let mut z: Vec<f64> = (0..n).map(|i| start[i].clamp(lo[i], hi[i])).collect();
    let mut lambda = warm
        .and_then(|w| w.multipliers.clone())
        .filter(|l| l.len() == m)
        .unwrap_or_else(|| vec![0.0; m]);
    let mut rho = warm
        .and_then(|w| w.penalty)
        .unwrap_or(opts.initial_penalty)
        .clamp(opts.initial_penalty.min(opts.max_penalty), opts.max_penalty);

    let mut grad_f = vec![0.0; n];
    let mut cons = vec![0.0; m];
    let f0 = p.objective(&z, &mut grad_f);
    p.constraints(&z, &mut cons);
    if !f0.is_finite() || grad_f.iter().chain(&cons).any(|v| !v.is_finite()) {
        return Err(Error::Evaluation { what: "objective/constraint", z_norm: inf_norm(&z), z });
    }
    let kkt_at = |z: &[f64], lambda: &[f64]| {
        let mut grad_f = vec![0.0; n];
        let mut cons = vec![0.0; m];
        let mut jt_y = vec![0.0; n];
        let f = p.objective(z, &mut grad_f);
        p.constraints(z, &mut cons);
        p.jacobian(z).tmul_vec(lambda, &mut jt_y);
        let g: Vec<f64> = (0..n).map(|i| grad_f[i] + jt_y[i]).collect();
        (f, cons, projected_gradient_norm(z, &g, &lo, &hi), g)
    };

    let structure = match opts.inner {
        InnerMethod::Newton => {
            let extra = p.objective_coupling();
            Some(HessianStructure::from_jacobian(n, &p.jacobian(&z), extra.as_deref()))
        }
        InnerMethod::Lbfgs => None,
    };

    let mut log = Vec::new();
    let mut total_iterations = 0usize;
    let mut outer = 0usize;
    let mut status = SolveStatus::MaxIterations;
    let mut prev_cnorm = f64::INFINITY;
    let mut omega = 1e-2_f64.max(opts.tol_kkt);
    let mut consecutive_failures = 0;

    let (mut f_obj, c0, mut kkt, mut lag_grad) = kkt_at(&z, &lambda);
    let mut cnorm = inf_norm(&c0);
    if cnorm <= opts.tol_eq && kkt <= opts.tol_kkt {
        status = SolveStatus::Converged;
    }

    while status != SolveStatus::Converged && outer < opts.max_outer_iterations {
        if total_iterations >= opts.max_iterations {
            status = SolveStatus::MaxIterations;
            break;
        }
        outer += 1;
        let last_obj = Cell::new(0.0);
        let last_cnorm = Cell::new(0.0);
        let mut sub = AlSubproblem {
            p,
            upper: &hi,
            y: lambda.clone(),
            rho,
            exec: opts.execution,
            structure: structure.as_ref(),
            last_obj: &last_obj,
            last_cnorm: &last_cnorm,
        };

        let mut g = vec![0.0; n];
        let Some(mut merit) = sub.value_grad(&z, &mut g) else {
            return Err(Error::Evaluation { what: "augmented Lagrangian", z_norm: inf_norm(&z), z });
        };
        let tol = omega.max(0.5 * opts.tol_kkt);
        let budget = (opts.max_iterations - total_iterations).min(opts.max_inner_iterations.max(1));
        let base_iter = total_iterations;
        let mut local = 0;
        let on_step = |step: &StepInfo| {
            local += 1;
            if opts.record_log {
                log.push(IterationLogEntry {
                    outer,
                    iter: base_iter + local,
                    objective: last_obj.get(),
                    merit: step.value,
                    eq_residual: last_cnorm.get(),
                    kkt_residual: step.pg_norm,
                    step_norm: step.step_norm,
                });
            }
        };
        let outcome = match opts.inner {
            InnerMethod::Newton => {
                ProjectedNewton { lower: &lo, upper: &hi, tol, max_iterations: budget }
                    .minimize(&mut sub, &mut z, &mut merit, &mut g, on_step)
            }
            InnerMethod::Lbfgs => {
                BoxMinimizer { lower: &lo, upper: &hi, memory: opts.memory, tol, max_iterations: budget }
                    .minimize(&mut sub, &mut z, &mut merit, &mut g, on_step)
            }
        };
        total_iterations += outcome.iterations;

        // first-order multiplier update
        let (_, c_new, _, _) = kkt_at(&z, &lambda);
        for j in 0..m {
            lambda[j] += rho * c_new[j];
        }
        let c;
        (f_obj, c, kkt, lag_grad) = kkt_at(&z, &lambda);
        cnorm = inf_norm(&c);
        debug!(
            "outer {outer}: f={f_obj:.10} |g|={cnorm:.3e} kkt={kkt:.3e} rho={rho:.1e} inner={} ({:?}, merit {:.6e}, |pg| {:.2e})",
            outcome.iterations, outcome.status, outcome.value, outcome.pg_norm
        );

        if cnorm <= opts.tol_eq && kkt <= opts.tol_kkt {
            status = SolveStatus::Converged;
            break;
        }
        match outcome.status {
            InnerStatus::LineSearchFailure if outcome.iterations == 0 => {
                consecutive_failures += 1;
                if consecutive_failures >= 3 {
                    status = SolveStatus::LineSearchFailure;
                    break;
                }
            }
            InnerStatus::MaxIterations if total_iterations >= opts.max_iterations => {
                status = SolveStatus::MaxIterations;
                break;
            }
            _ => consecutive_failures = 0,
        }
        if cnorm > opts.required_decrease * prev_cnorm {
            rho = (rho * opts.penalty_growth).min(opts.max_penalty);
        }
        prev_cnorm = cnorm;
        omega = (omega * 0.1).max(0.5 * opts.tol_kkt);
    }

    let active_tol = |b: f64| opts.tol_bound.max(1e-10 * (1.0 + b.abs()));
    let bound_multipliers = (0..n)
        .map(|i| {
            if z[i] - lo[i] <= active_tol(lo[i]) && lag_grad[i] > 0.0 {
                lag_grad[i]
            } else if hi[i] - z[i] <= active_tol(hi[i]) && lag_grad[i] < 0.0 {
                -lag_grad[i]
            } else {
                0.0
            }
        })
        .collect();

    Ok(NlpSolution {
        z,
        objective_value: f_obj,
        equality_residual_norm: cnorm,
        kkt_residual: kkt,
        multipliers: lambda,
        bound_multipliers,
        status,
        iterations: total_iterations,
        outer_iterations: outer,
        penalty: rho,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DoubleTankParams;
    use crate::relaxed::RelaxedTranscription;

    #[test]
    fn sparse_hessian_matches_dense_differences() {
        let spec = DoubleTankParams::default().problem();
        let p = RelaxedTranscription::new(&spec, 6).unwrap();
        let n = p.num_variables();
        let m = p.num_constraints();
        let (_, hi) = p.bounds();
        let z: Vec<f64> = (0..n).map(|i| 0.3 + 0.4 * ((i as f64) * 0.7).sin().abs()).collect();
        let (lo, _) = p.bounds();
        let z: Vec<f64> = (0..n).map(|i| z[i].clamp(lo[i], hi[i])).collect();
        let y: Vec<f64> = (0..m).map(|j| (j as f64 * 1.3).cos()).collect();
        let extra = p.objective_coupling();
        let hs = HessianStructure::from_jacobian(n, &p.jacobian(&z), extra.as_deref());
        let (a, b) = (Cell::new(0.0), Cell::new(0.0));
        let mut sub = AlSubproblem {
            p: &p,
            upper: &hi,
            y,
            rho: 100.0,
            exec: Execution::Sequential,
            structure: Some(&hs),
            last_obj: &a,
            last_cnorm: &b,
        };
        let mut sky = hs.skyline();
        sub.hessian(&z, &mut sky);
        let ip = &hs.ordering.iperm;
        let mut worst = 0.0_f64;
        for j in 0..n {
            let h = 1e-5;
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[j] += h;
            zm[j] -= h;
            let (mut gp, mut gm) = (vec![0.0; n], vec![0.0; n]);
            sub.value_grad(&zp, &mut gp).unwrap();
            sub.value_grad(&zm, &mut gm).unwrap();
            for i in 0..n {
                let exact = (gp[i] - gm[i]) / (2.0 * h);
                let (pi, pj) = (ip[i].max(ip[j]), ip[i].min(ip[j]));
                let est = if pj >= sky.first(pi) { sky.vals[sky.slot(pi, pj)] } else { 0.0 };
                let in_pattern = hs.adj[i].contains(&j);
                let got = if in_pattern { est } else { 0.0 };
                worst = worst.max((got - exact).abs() / (1.0 + exact.abs()));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
