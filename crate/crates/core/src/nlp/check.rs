use serde::Serialize;

use super::NlpProblem;
use crate::exec::Execution;

/// Entries whose relative error exceeds this are flagged.
pub const FLAG_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DerivativeKind {
    Gradient,
    Jacobian,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlaggedEntry {
    pub kind: DerivativeKind,
    /// Constraint row (always 0 for the gradient).
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub max_gradient_error: f64,
    pub max_jacobian_error: f64,
    pub flagged: Vec<FlaggedEntry>,
}

impl DerivativeReport {
    pub fn is_clean(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// `|a - b| / max(1, |a|, |b|)`: relative for large entries, absolute for
/// entries below one.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares the analytic objective gradient and constraint Jacobian of `p`
/// at `z` with central differences using the step `1e-6 (1 + |z_i|)`.
pub fn check_derivatives<P: NlpProblem + ?Sized>(p: &P, z: &[f64], exec: Execution) -> DerivativeReport {
    let n = p.num_variables();
    let m = p.num_constraints();
    let mut grad = vec![0.0; n];
    p.objective(z, &mut grad);

    // analytic Jacobian, column-major
    let jac = p.jacobian(z);
    let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for k in 0..jac.nnz() {
        columns[jac.cols[k]].push((jac.rows[k], jac.vals[k]));
    }

    let per_column = exec.map_indexed(n, |j| {
        let h = 1e-6 * (1.0 + z[j].abs());
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[j] += h;
        zm[j] -= h;
        let mut scratch = vec![0.0; n];
        let fp = p.objective(&zp, &mut scratch);
        let fm = p.objective(&zm, &mut scratch);
        let numeric = (fp - fm) / (2.0 * h);
        let g_err = relative_error(grad[j], numeric);
        let mut flagged = Vec::new();
        if g_err > FLAG_THRESHOLD {
            flagged.push(FlaggedEntry {
                kind: DerivativeKind::Gradient,
                row: 0,
                col: j,
                analytic: grad[j],
                numeric,
                rel_error: g_err,
            });
        }

        let mut j_err = 0.0_f64;
        if m > 0 {
            let mut cp = vec![0.0; m];
            let mut cm = vec![0.0; m];
            p.constraints(&zp, &mut cp);
            p.constraints(&zm, &mut cm);
            let mut analytic = vec![0.0; m];
            for &(r, v) in &columns[j] {
                analytic[r] += v;
            }
            for r in 0..m {
                let numeric = (cp[r] - cm[r]) / (2.0 * h);
                let e = relative_error(analytic[r], numeric);
                j_err = j_err.max(e);
                if e > FLAG_THRESHOLD {
                    flagged.push(FlaggedEntry {
                        kind: DerivativeKind::Jacobian,
                        row: r,
                        col: j,
                        analytic: analytic[r],
                        numeric,
                        rel_error: e,
                    });
                }
            }
        }
        (g_err, j_err, flagged)
    });

    let mut report = DerivativeReport { max_gradient_error: 0.0, max_jacobian_error: 0.0, flagged: Vec::new() };
    for (g, j, f) in per_column {
        report.max_gradient_error = report.max_gradient_error.max(g);
        report.max_jacobian_error = report.max_jacobian_error.max(j);
        report.flagged.extend(f);
    }
    report
}
