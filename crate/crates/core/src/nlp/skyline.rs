//! Symmetric envelope (skyline) storage with an in-place Cholesky factor.
//!
//! Variables are permuted by reverse Cuthill-McKee so the envelope stays
//! narrow; very dense variables are moved to the end, which turns them into
//! an arrowhead that the envelope stores without fill elsewhere.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub(crate) struct Ordering {
    /// `perm[new] = old`
    pub perm: Vec<usize>,
    /// `iperm[old] = new`
    pub iperm: Vec<usize>,
}

/// Reverse Cuthill-McKee on the graph `adj` (self loops ignored), with
/// nodes of degree above `dense_threshold` appended last.
pub(crate) fn rcm_ordering(adj: &[Vec<usize>], dense_threshold: usize) -> Ordering {
    let n = adj.len();
    let dense: Vec<bool> = adj.iter().map(|a| a.len() > dense_threshold).collect();
    let degree: Vec<usize> = adj
        .iter()
        .enumerate()
        .map(|(i, a)| a.iter().filter(|&&j| j != i && !dense[j]).count())
        .collect();
    let mut visited = dense.clone();
    let mut order = Vec::with_capacity(n);
    let neighbors = |i: usize, visited: &[bool]| {
        let mut nb: Vec<usize> = adj[i].iter().copied().filter(|&j| j != i && !visited[j]).collect();
        nb.sort_by_key(|&j| (degree[j], j));
        nb
    };
    loop {
        let Some(seed) = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| (degree[i], i)) else {
            break;
        };
        let start = pseudo_peripheral(seed, adj, &dense, &degree);
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        let mut component = Vec::new();
        while let Some(i) = queue.pop_front() {
            component.push(i);
            for j in neighbors(i, &visited) {
                visited[j] = true;
                queue.push_back(j);
            }
        }
        order.extend(component);
    }
    order.reverse();
    order.extend((0..n).filter(|&i| dense[i]));
    let mut iperm = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        iperm[old] = new;
    }
    Ordering { perm: order, iperm }
}

/// Last-level, minimum-degree node of repeated BFS sweeps.
fn pseudo_peripheral(seed: usize, adj: &[Vec<usize>], dense: &[bool], degree: &[usize]) -> usize {
    let mut start = seed;
    let mut depth = 0;
    for _ in 0..4 {
        let mut level = vec![usize::MAX; adj.len()];
        level[start] = 0;
        let mut queue = VecDeque::from([start]);
        let mut last = start;
        while let Some(i) = queue.pop_front() {
            last = i;
            for &j in &adj[i] {
                if !dense[j] && level[j] == usize::MAX {
                    level[j] = level[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        let ecc = level[last];
        let candidate = (0..adj.len())
            .filter(|&i| level[i] == ecc)
            .min_by_key(|&i| (degree[i], i))
            .unwrap_or(last);
        if ecc <= depth {
            break;
        }
        depth = ecc;
        start = candidate;
    }
    start
}

/// Lower envelope of a symmetric matrix in permuted numbering.
#[derive(Debug, Clone)]
pub(crate) struct Skyline {
    pub n: usize,
    first: Vec<usize>,
    offset: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Skyline {
    /// Envelope covering the pattern `adj` (old numbering) under `ord`.
    pub fn new(adj: &[Vec<usize>], ord: &Ordering) -> Self {
        let n = adj.len();
        let mut first: Vec<usize> = (0..n).collect();
        for (i, nb) in adj.iter().enumerate() {
            for &j in nb {
                let (p, q) = (ord.iperm[i], ord.iperm[j]);
                let (hi, lo) = if p >= q { (p, q) } else { (q, p) };
                first[hi] = first[hi].min(lo);
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for p in 0..n {
            offset.push(acc);
            acc += p - first[p] + 1;
        }
        offset.push(acc);
        Self { n, first, offset, vals: vec![0.0; acc] }
    }

    #[cfg(test)]
    pub fn envelope_size(&self) -> usize {
        self.vals.len()
    }

    pub fn clear(&mut self) {
        self.vals.fill(0.0);
    }

    /// Slot of `(p, q)` in permuted numbering, `p >= q`.
    #[inline]
    pub fn slot(&self, p: usize, q: usize) -> usize {
        debug_assert!(p >= q && q >= self.first[p]);
        self.offset[p] + (q - self.first[p])
    }

    #[inline]
    pub fn first(&self, p: usize) -> usize {
        self.first[p]
    }

    #[inline]
    pub fn add_diag(&mut self, p: usize, v: f64) {
        let s = self.offset[p + 1] - 1;
        self.vals[s] += v;
    }

    pub fn row_mut(&mut self, p: usize) -> &mut [f64] {
        let (a, b) = (self.offset[p], self.offset[p + 1]);
        &mut self.vals[a..b]
    }

    /// In-place Cholesky factorization `A = L L^T`. Returns `false` on a
    /// pivot that is not safely positive; the contents are then garbage.
    #[cfg(test)]
    pub fn factor(&mut self) -> bool {
        self.factor_with_pivot_tol(1e-13)
    }

    /// As [`Self::factor`], rejecting pivots below `rel * |a_ii|`.
    pub fn factor_with_pivot_tol(&mut self, rel: f64) -> bool {
        for i in 0..self.n {
            let fi = self.first[i];
            let oi = self.offset[i];
            for j in fi..i {
                let fj = self.first[j];
                let oj = self.offset[j];
                let k0 = fi.max(fj);
                let mut s = self.vals[oi + (j - fi)];
                for k in k0..j {
                    s -= self.vals[oi + (k - fi)] * self.vals[oj + (k - fj)];
                }
                let ljj = self.vals[oj + (j - fj)];
                self.vals[oi + (j - fi)] = s / ljj;
            }
            let di = oi + (i - fi);
            let aii = self.vals[di];
            let mut s = aii;
            for k in fi..i {
                let l = self.vals[oi + (k - fi)];
                s -= l * l;
            }
            if !(s > rel * aii.abs().max(1e-300)) || !s.is_finite() {
                return false;
            }
            self.vals[di] = s.sqrt();
        }
        true
    }

    /// `y = A x` for the symmetric matrix stored in the envelope.
    pub fn mul_sym(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for i in 0..self.n {
            let fi = self.first[i];
            let oi = self.offset[i];
            for k in fi..i {
                let a = self.vals[oi + (k - fi)];
                y[i] += a * x[k];
                y[k] += a * x[i];
            }
            y[i] += self.vals[oi + (i - fi)] * x[i];
        }
    }

    /// Solves `L L^T x = b` in place (permuted numbering).
    pub fn solve(&self, b: &mut [f64]) {
        for i in 0..self.n {
            let fi = self.first[i];
            let oi = self.offset[i];
            let mut s = b[i];
            for k in fi..i {
                s -= self.vals[oi + (k - fi)] * b[k];
            }
            b[i] = s / self.vals[oi + (i - fi)];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let oi = self.offset[i];
            b[i] /= self.vals[oi + (i - fi)];
            let xi = b[i];
            for k in fi..i {
                b[k] -= self.vals[oi + (k - fi)] * xi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph(n: usize) -> Vec<Vec<usize>> {
        (0..n)
            .map(|i| {
                let mut v = vec![i];
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < n {
                    v.push(i + 1);
                }
                v
            })
            .collect()
    }

    #[test]
    fn rcm_keeps_path_banded() {
        // scramble a path graph and check the envelope stays tridiagonal
        let n = 50;
        let scramble: Vec<usize> = (0..n).map(|i| (i * 17) % n).collect();
        let base = path_graph(n);
        let mut adj = vec![Vec::new(); n];
        for (i, nb) in base.iter().enumerate() {
            adj[scramble[i]] = nb.iter().map(|&j| scramble[j]).collect();
        }
        let ord = rcm_ordering(&adj, usize::MAX);
        let sky = Skyline::new(&adj, &ord);
        assert_eq!(sky.envelope_size(), 2 * n - 1);
    }

    #[test]
    fn dense_nodes_go_last() {
        let n = 30;
        let mut adj = path_graph(n);
        // node 0 connects to everything
        adj[0] = (0..n).collect();
        for (i, nb) in adj.iter_mut().enumerate().skip(1) {
            if !nb.contains(&0) {
                nb.push(0);
            }
            nb.push(i);
        }
        let ord = rcm_ordering(&adj, 10);
        assert_eq!(ord.perm[n - 1], 0);
    }

    #[test]
    fn factor_and_solve_spd() {
        // tridiagonal (-1, 4, -1) plus an arrowhead on the last variable
        let n = 20;
        let mut adj = path_graph(n);
        for i in 0..n {
            if !adj[i].contains(&(n - 1)) {
                adj[i].push(n - 1);
                adj[n - 1].push(i);
            }
        }
        let ord = rcm_ordering(&adj, 8);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            dense[i][i] = 4.0 + i as f64 * 0.1;
            if i + 1 < n {
                dense[i][i + 1] = -1.0;
                dense[i + 1][i] = -1.0;
            }
            if i < n - 2 {
                dense[i][n - 1] = 0.2;
                dense[n - 1][i] = 0.2;
            }
        }
        let mut sky = Skyline::new(&adj, &ord);
        for i in 0..n {
            for j in 0..=i {
                if dense[i][j] != 0.0 {
                    let (p, q) = (ord.iperm[i], ord.iperm[j]);
                    let (p, q) = if p >= q { (p, q) } else { (q, p) };
                    let s = sky.slot(p, q);
                    sky.vals[s] += dense[i][j];
                }
            }
        }
        assert!(sky.factor());
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let b: Vec<f64> = (0..n).map(|i| (0..n).map(|j| dense[i][j] * x_true[j]).sum()).collect();
        let mut bp: Vec<f64> = (0..n).map(|p| b[ord.perm[p]]).collect();
        sky.solve(&mut bp);
        for p in 0..n {
            assert!((bp[p] - x_true[ord.perm[p]]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_fails() {
        let adj = path_graph(3);
        let ord = rcm_ordering(&adj, usize::MAX);
        let mut sky = Skyline::new(&adj, &ord);
        for p in 0..3 {
            sky.add_diag(p, -1.0);
        }
        assert!(!sky.factor());
    }
}
