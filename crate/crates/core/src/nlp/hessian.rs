//! Sparsity structure and colored finite differences for the Hessian of the
//! Lagrangian.
//!
//! The Hessian pattern is taken as `pattern(J^T J)` plus the diagonal: every
//! second-order coupling of a stage-separable transcription shares a
//! constraint row. Dense variables (for instance stage durations that enter
//! every row of their stage) are differenced one at a time; the remaining
//! variables are grouped by a distance-2 coloring that ignores paths through
//! dense rows, whose entries come from the dense columns instead.

use super::skyline::{rcm_ordering, Ordering, Skyline};
use super::SparseMatrix;

#[derive(Debug, Clone)]
pub(crate) struct HessianStructure {
    /// Symmetric adjacency including self loops, sorted.
    pub adj: Vec<Vec<usize>>,
    pub dense: Vec<bool>,
    pub colors: Vec<Vec<usize>>,
    pub ordering: Ordering,
    /// Jacobian entry indices grouped by row.
    row_ptr: Vec<usize>,
    row_entries: Vec<usize>,
}

impl HessianStructure {
    /// Pattern of `J^T J` plus the diagonal and the `extra` pairs; with
    /// `extra == None` every pair of variables is assumed coupled.
    pub fn from_jacobian(n: usize, jac: &SparseMatrix, extra: Option<&[(usize, usize)]>) -> Self {
        let full = extra.is_none();
        let m = jac.nrows;
        let mut counts = vec![0usize; m + 1];
        for &r in &jac.rows {
            counts[r + 1] += 1;
        }
        for r in 0..m {
            counts[r + 1] += counts[r];
        }
        let row_ptr = counts.clone();
        let mut fill = counts;
        let mut row_entries = vec![0; jac.nnz()];
        for (k, &r) in jac.rows.iter().enumerate() {
            row_entries[fill[r]] = k;
            fill[r] += 1;
        }

        let mut adj: Vec<Vec<usize>> = if full {
            vec![(0..n).collect(); n]
        } else {
            (0..n).map(|i| vec![i]).collect()
        };
        for r in (0..m).filter(|_| !full) {
            let mut cols: Vec<usize> = row_entries[row_ptr[r]..row_ptr[r + 1]].iter().map(|&k| jac.cols[k]).collect();
            cols.sort_unstable();
            cols.dedup();
            for &a in &cols {
                adj[a].extend(cols.iter().copied());
            }
        }
        for &(a, b) in extra.unwrap_or(&[]) {
            adj[a].push(b);
            adj[b].push(a);
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }

        let mut degrees: Vec<usize> = adj.iter().map(Vec::len).collect();
        degrees.sort_unstable();
        let median = degrees.get(n / 2).copied().unwrap_or(1);
        let threshold = 64usize.max(10 * median);
        let dense: Vec<bool> = adj.iter().map(|a| a.len() > threshold).collect();

        let colors = color_columns(&adj, &dense);
        let ordering = rcm_ordering(&adj, threshold);
        Self { adj, dense, colors, ordering, row_ptr, row_entries }
    }

    pub fn skyline(&self) -> Skyline {
        Skyline::new(&self.adj, &self.ordering)
    }

    /// Adds `scale * J^T J` to `sky`.
    pub fn add_jtj(&self, jac: &SparseMatrix, scale: f64, sky: &mut Skyline) {
        let iperm = &self.ordering.iperm;
        for r in 0..self.row_ptr.len() - 1 {
            let entries = &self.row_entries[self.row_ptr[r]..self.row_ptr[r + 1]];
            for &a in entries {
                let pa = iperm[jac.cols[a]];
                let va = scale * jac.vals[a];
                for &b in entries {
                    let pb = iperm[jac.cols[b]];
                    if pb <= pa {
                        let s = sky.slot(pa, pb);
                        sky.vals[s] += va * jac.vals[b];
                    }
                }
            }
        }
    }

    /// Adds the finite-difference estimate for the columns of one color:
    /// `diff = G(z + sum_j steps[j] e_j) - G(z)` for `j` in the color.
    pub fn add_color_estimate(&self, color: usize, steps: &[f64], diff: &[f64], sky: &mut Skyline) {
        let iperm = &self.ordering.iperm;
        for &j in &self.colors[color] {
            let h = steps[j];
            for &i in &self.adj[j] {
                if self.dense[i] && !self.dense[j] {
                    continue;
                }
                let w = if i == j || self.dense[i] != self.dense[j] { 1.0 } else { 0.5 };
                let (p, q) = (iperm[i], iperm[j]);
                let (p, q) = if p >= q { (p, q) } else { (q, p) };
                let s = sky.slot(p, q);
                sky.vals[s] += w * diff[i] / h;
            }
        }
    }
}

/// Greedy coloring: dense columns get their own color; sparse columns
/// sharing a sparse row of the Hessian pattern get different colors.
fn color_columns(adj: &[Vec<usize>], dense: &[bool]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut color = vec![usize::MAX; n];
    let mut stamp = vec![usize::MAX; n + 1];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for j in (0..n).filter(|&j| !dense[j]) {
        for &i in &adj[j] {
            if dense[i] {
                continue;
            }
            for &k in &adj[i] {
                if !dense[k] && color[k] != usize::MAX {
                    stamp[color[k]] = j;
                }
            }
        }
        let c = (0..).find(|&c| c >= groups.len() || stamp[c] != j).unwrap();
        if c == groups.len() {
            groups.push(Vec::new());
        }
        groups[c].push(j);
        color[j] = c;
    }
    for j in (0..n).filter(|&j| dense[j]) {
        groups.push(vec![j]);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tridiagonal_needs_three_colors() {
        // rows couple (i, i+1): J^T J is tridiagonal
        let n = 12;
        let mut j = SparseMatrix::new(n - 1, n);
        for r in 0..n - 1 {
            j.push(r, r, 1.0);
            j.push(r, r + 1, -1.0);
        }
        let s = HessianStructure::from_jacobian(n, &j, Some(&[]));
        assert!(s.dense.iter().all(|d| !d));
        assert_eq!(s.colors.len(), 3);
        // every column colored exactly once
        let mut seen: Vec<usize> = s.colors.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn colored_estimate_recovers_quadratic_hessian() {
        // f(z) = sum (z_i - z_{i+1})^2 + sum z_i^2 has a tridiagonal Hessian
        let n = 9;
        let mut jac = SparseMatrix::new(n - 1, n);
        for r in 0..n - 1 {
            jac.push(r, r, 1.0);
            jac.push(r, r + 1, 1.0);
        }
        let s = HessianStructure::from_jacobian(n, &jac, Some(&[]));
        let grad = |z: &[f64]| {
            let mut g: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
            for i in 0..n - 1 {
                let d = z[i] - z[i + 1];
                g[i] += 2.0 * d;
                g[i + 1] -= 2.0 * d;
            }
            g
        };
        let z: Vec<f64> = (0..n).map(|i| i as f64 * 0.3).collect();
        let g0 = grad(&z);
        let steps = vec![1e-3; n];
        let mut sky = s.skyline();
        for c in 0..s.colors.len() {
            let mut zp = z.clone();
            for &j in &s.colors[c] {
                zp[j] += steps[j];
            }
            let diff: Vec<f64> = grad(&zp).iter().zip(&g0).map(|(a, b)| a - b).collect();
            s.add_color_estimate(c, &steps, &diff, &mut sky);
        }
        let ip = &s.ordering.iperm;
        let at = |i: usize, j: usize| {
            let (p, q) = (ip[i].max(ip[j]), ip[i].min(ip[j]));
            sky.vals[sky.slot(p, q)]
        };
        for i in 0..n {
            let expect = if i == 0 || i == n - 1 { 4.0 } else { 6.0 };
            assert!((at(i, i) - expect).abs() < 1e-9);
            if i + 1 < n {
                assert!((at(i, i + 1) + 2.0).abs() < 1e-9);
            }
        }
    }
}
