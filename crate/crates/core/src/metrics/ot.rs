//! Exact discrete optimal transport via the transportation simplex.
//!
//! The basis is kept as a spanning tree over `m` supply and `n` demand nodes;
//! entering cells are picked with block search and potentials are recomputed
//! after each pivot.

use std::collections::VecDeque;

use crate::error::{Error, Result};

const EPS: f64 = 1e-12;

/// Solves `min Σ c_ij x_ij` subject to row sums `supply` and column sums
/// `demand` (totals must agree up to rounding). `cost` is row-major `m × n`.
/// Returns the optimal objective.
pub fn transport_cost(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<f64> {
    let m = supply.len();
    let n = demand.len();
    if m == 0 || n == 0 {
        return Ok(0.0);
    }
    assert_eq!(cost.len(), m * n, "cost matrix must be m × n");
    let mut solver = Simplex::new(supply, demand, cost);
    solver.run()?;
    Ok(solver.objective())
}

struct Simplex<'a> {
    m: usize,
    n: usize,
    cost: &'a [f64],
    // basic cells: (row, col, flow)
    cells: Vec<(usize, usize, f64)>,
    // adjacency over nodes 0..m (rows) and m..m+n (cols) -> basic cell ids
    adj: Vec<Vec<usize>>,
    u: Vec<f64>,
    v: Vec<f64>,
    parent_cell: Vec<usize>,
    parent: Vec<usize>,
    depth: Vec<usize>,
    scan_pos: usize,
}

impl<'a> Simplex<'a> {
    fn new(supply: &[f64], demand: &[f64], cost: &'a [f64]) -> Self {
        let (m, n) = (supply.len(), demand.len());
        // Northwest corner start: exactly m + n − 1 cells forming a staircase tree.
        let mut s = supply.to_vec();
        let mut d = demand.to_vec();
        let mut cells = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let last = i == m - 1 && j == n - 1;
            let x = if last {
                s[i].max(0.0)
            } else {
                s[i].min(d[j]).max(0.0)
            };
            cells.push((i, j, x));
            s[i] -= x;
            d[j] -= x;
            if last {
                break;
            }
            if j == n - 1 || (i < m - 1 && s[i] <= d[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        let mut adj = vec![Vec::new(); m + n];
        for (id, &(r, c, _)) in cells.iter().enumerate() {
            adj[r].push(id);
            adj[m + c].push(id);
        }
        Self {
            m,
            n,
            cost,
            cells,
            adj,
            u: vec![0.0; m],
            v: vec![0.0; n],
            parent_cell: vec![usize::MAX; m + n],
            parent: vec![usize::MAX; m + n],
            depth: vec![0; m + n],
            scan_pos: 0,
        }
    }

    fn objective(&self) -> f64 {
        self.cells
            .iter()
            .map(|&(r, c, x)| x * self.cost[r * self.n + c])
            .sum()
    }

    /// Roots the basis tree at row node 0 and recomputes potentials.
    fn rebuild_tree(&mut self) {
        let m = self.m;
        let mut seen = vec![false; m + self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        self.u[0] = 0.0;
        self.parent[0] = usize::MAX;
        self.parent_cell[0] = usize::MAX;
        self.depth[0] = 0;
        while let Some(node) = queue.pop_front() {
            for &id in &self.adj[node] {
                let (r, c, _) = self.cells[id];
                let other = if node < m { m + c } else { r };
                if seen[other] {
                    continue;
                }
                seen[other] = true;
                let cij = self.cost[r * self.n + c];
                if other < m {
                    self.u[r] = cij - self.v[c];
                } else {
                    self.v[c] = cij - self.u[r];
                }
                self.parent[other] = node;
                self.parent_cell[other] = id;
                self.depth[other] = self.depth[node] + 1;
                queue.push_back(other);
            }
        }
    }

    /// Block search for a cell with negative reduced cost.
    fn entering(&mut self) -> Option<(usize, usize)> {
        let total = self.m * self.n;
        let block = ((total as f64).sqrt().ceil() as usize).max(16);
        let mut best: Option<(usize, f64)> = None;
        let mut scanned = 0;
        let mut in_block = 0;
        while scanned < total {
            let k = self.scan_pos;
            self.scan_pos = (self.scan_pos + 1) % total;
            scanned += 1;
            in_block += 1;
            let (r, c) = (k / self.n, k % self.n);
            let rc = self.cost[k] - self.u[r] - self.v[c];
            if rc < -EPS && best.is_none_or(|(_, b)| rc < b) {
                best = Some((k, rc));
            }
            if in_block >= block {
                if best.is_some() {
                    break;
                }
                in_block = 0;
            }
        }
        best.map(|(k, _)| (k / self.n, k % self.n))
    }

    fn run(&mut self) -> Result<()> {
        let max_pivots = 50 * (self.m * self.n) + 1000;
        self.rebuild_tree();
        for _ in 0..max_pivots {
            let Some((r, c)) = self.entering() else {
                return Ok(());
            };
            self.pivot(r, c);
            self.rebuild_tree();
        }
        Err(Error::Numerics("transport simplex did not converge".into()))
    }

    /// Adds cell (r, c), pushes flow around the unique cycle and drops the
    /// blocking cell.
    fn pivot(&mut self, r: usize, c: usize) {
        let m = self.m;
        // Tree path from column node to row node; cycle = entering cell + path.
        let (mut a, mut b) = (m + c, r);
        let mut from_a = Vec::new();
        let mut from_b = Vec::new();
        while a != b {
            if self.depth[a] >= self.depth[b] {
                from_a.push(self.parent_cell[a]);
                a = self.parent[a];
            } else {
                from_b.push(self.parent_cell[b]);
                b = self.parent[b];
            }
        }
        from_b.reverse();
        let path: Vec<usize> = from_a.into_iter().chain(from_b).collect();
        // Walking from the column node, the first path cell loses flow, then
        // signs alternate.
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (k, &id) in path.iter().enumerate() {
            if k % 2 == 0 && self.cells[id].2 < theta {
                theta = self.cells[id].2;
                leave = id;
            }
        }
        let theta = theta.max(0.0);
        for (k, &id) in path.iter().enumerate() {
            if k % 2 == 0 {
                self.cells[id].2 -= theta;
            } else {
                self.cells[id].2 += theta;
            }
        }
        // Reuse the leaving slot for the entering cell.
        let (lr, lc, _) = self.cells[leave];
        self.adj[lr].retain(|&x| x != leave);
        self.adj[m + lc].retain(|&x| x != leave);
        self.cells[leave] = (r, c, theta);
        self.adj[r].push(leave);
        self.adj[m + c].push(leave);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_mass() {
        let v = transport_cost(&[1.0], &[1.0], &[0.7]).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_prefers_diagonal() {
        // costs favour (0,1) and (1,0)
        let cost = [1.0, 0.1, 0.2, 1.0];
        let v = transport_cost(&[0.5, 0.5], &[0.5, 0.5], &cost).unwrap();
        assert!((v - 0.15).abs() < 1e-12, "{v}");
    }

    #[test]
    fn degenerate_supplies_are_handled() {
        // supplies equal demands pairwise: northwest corner is degenerate
        let cost = [0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let v = transport_cost(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5], &cost).unwrap();
        assert!(v.abs() < 1e-12);
        let v = transport_cost(&[0.2, 0.3, 0.5], &[0.5, 0.3, 0.2], &cost).unwrap();
        assert!((v - 0.3).abs() < 1e-12, "{v}");
    }
}
