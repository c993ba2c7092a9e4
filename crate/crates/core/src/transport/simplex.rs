//! Primal network simplex for the transportation problem.
//!
//! The graph is the complete bipartite graph between `n` supply rows and `m`
//! demand columns; a basis is a spanning tree of `n + m - 1` cells. Supplies
//! are perturbed (`a_i + eps`, last demand `+ n * eps`) so that every basic
//! solution is nondegenerate and Dantzig pricing cannot cycle. Once the optimal
//! tree is found the flows are recomputed on that tree from the unperturbed
//! supplies: the reduced costs do not depend on the supplies, so the tree stays
//! optimal.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const PERTURBATION: f64 = 1e-10;
const PRICING_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
struct Cell {
    row: usize,
    col: usize,
    flow: f64,
}

/// Returns the basic cells `(row, col, flow)` of an optimal plan.
pub(crate) fn transport_simplex(
    supply: &[f64],
    demand: &[f64],
    cost: &Matrix,
) -> Result<Vec<(usize, usize, f64)>> {
    let n = supply.len();
    let m = demand.len();
    debug_assert_eq!((cost.rows(), cost.cols()), (n, m));

    let eps = PERTURBATION / n as f64;
    let p_supply: Vec<f64> = supply.iter().map(|s| s + eps).collect();
    let mut p_demand = demand.to_vec();
    p_demand[m - 1] += n as f64 * eps;

    let mut cells = northwest_corner(&p_supply, &p_demand);
    let mut basic = alloc::vec![false; n * m];
    for c in &cells {
        basic[c.row * m + c.col] = true;
    }

    let max_cost = cost.as_slice().iter().fold(0.0f64, |a, &b| a.max(b));
    let threshold = -PRICING_TOL * max_cost.max(1.0);
    let max_pivots = 50 * (n + m) * (n + m) + 1000;

    let mut tree = Tree::new(n, m);
    let mut u = alloc::vec![0.0; n];
    let mut v = alloc::vec![0.0; m];
    let mut pivots = 0;
    loop {
        tree.rebuild(&cells);
        tree.potentials(&cells, cost, &mut u, &mut v);

        let mut entering = None;
        let mut best = threshold;
        for i in 0..n {
            for j in 0..m {
                if basic[i * m + j] {
                    continue;
                }
                let r = cost[(i, j)] - u[i] - v[j];
                if r < best {
                    best = r;
                    entering = Some((i, j));
                }
            }
        }
        let Some((p, q)) = entering else { break };

        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::SolverStalled(max_pivots));
        }

        // Tree path from column q back to row p; cells alternate -, +, -, ...
        let path = tree.path(&cells, p, n + q);
        let mut leaving = path[0];
        for &ci in path.iter().step_by(2) {
            if cells[ci].flow < cells[leaving].flow {
                leaving = ci;
            }
        }
        let theta = cells[leaving].flow;
        for (k, &ci) in path.iter().enumerate() {
            let c = &mut cells[ci];
            c.flow = if k % 2 == 0 {
                (c.flow - theta).max(0.0)
            } else {
                c.flow + theta
            };
        }
        let old = cells[leaving];
        basic[old.row * m + old.col] = false;
        basic[p * m + q] = true;
        cells[leaving] = Cell {
            row: p,
            col: q,
            flow: theta,
        };
    }

    tree.rebuild(&cells);
    tree.tree_flows(&mut cells, supply, demand);
    Ok(cells.into_iter().map(|c| (c.row, c.col, c.flow)).collect())
}

/// Staircase initial basis; always yields exactly `n + m - 1` cells.
fn northwest_corner(supply: &[f64], demand: &[f64]) -> Vec<Cell> {
    let (n, m) = (supply.len(), demand.len());
    let mut cells = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0, 0);
    let mut s = supply[0];
    let mut d = demand[0];
    loop {
        let x = s.min(d).max(0.0);
        cells.push(Cell { row: i, col: j, flow: x });
        s -= x;
        d -= x;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if j == m - 1 || (i < n - 1 && s <= d) {
            i += 1;
            s = supply[i];
        } else {
            j += 1;
            d = demand[j];
        }
    }
    cells
}

/// Adjacency of the basis tree over nodes `0..n` (rows) and `n..n+m`
/// (columns).
struct Tree {
    n: usize,
    adj: Vec<Vec<usize>>,
    parent_cell: Vec<usize>,
    visited: Vec<bool>,
    queue: VecDeque<usize>,
}

impl Tree {
    fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            adj: alloc::vec![Vec::new(); n + m],
            parent_cell: alloc::vec![usize::MAX; n + m],
            visited: alloc::vec![false; n + m],
            queue: VecDeque::new(),
        }
    }

    fn rebuild(&mut self, cells: &[Cell]) {
        self.adj.iter_mut().for_each(Vec::clear);
        for (ci, c) in cells.iter().enumerate() {
            self.adj[c.row].push(ci);
            self.adj[self.n + c.col].push(ci);
        }
    }

    fn other(&self, c: &Cell, node: usize) -> usize {
        if node < self.n {
            self.n + c.col
        } else {
            c.row
        }
    }

    /// BFS from `start`, recording the cell through which each node was
    /// reached.
    fn bfs(&mut self, cells: &[Cell], start: usize, mut visit: impl FnMut(usize, &Cell, usize)) {
        self.visited.iter_mut().for_each(|v| *v = false);
        self.queue.clear();
        self.visited[start] = true;
        self.queue.push_back(start);
        while let Some(node) = self.queue.pop_front() {
            for k in 0..self.adj[node].len() {
                let ci = self.adj[node][k];
                let next = self.other(&cells[ci], node);
                if !self.visited[next] {
                    self.visited[next] = true;
                    self.parent_cell[next] = ci;
                    visit(node, &cells[ci], next);
                    self.queue.push_back(next);
                }
            }
        }
    }

    /// Dual potentials with `u[0] = 0` and `u_i + v_j = c_ij` on basic cells.
    fn potentials(&mut self, cells: &[Cell], cost: &Matrix, u: &mut [f64], v: &mut [f64]) {
        let n = self.n;
        u[0] = 0.0;
        self.bfs(cells, 0, |from, c, _| {
            let cij = cost[(c.row, c.col)];
            if from < n {
                v[c.col] = cij - u[c.row];
            } else {
                u[c.row] = cij - v[c.col];
            }
        });
    }

    /// Cell indices on the tree path from `to` back to `from`.
    fn path(&mut self, cells: &[Cell], from: usize, to: usize) -> Vec<usize> {
        self.bfs(cells, from, |_, _, _| {});
        let mut path = Vec::new();
        let mut node = to;
        while node != from {
            let ci = self.parent_cell[node];
            path.push(ci);
            node = self.other(&cells[ci], node);
        }
        path
    }

    /// Basic solution of the tree for the given supplies, by peeling leaves.
    fn tree_flows(&self, cells: &mut [Cell], supply: &[f64], demand: &[f64]) {
        let n = self.n;
        let mut rem: Vec<f64> = supply.iter().chain(demand).copied().collect();
        let mut degree: Vec<usize> = self.adj.iter().map(Vec::len).collect();
        let mut done = alloc::vec![false; cells.len()];
        let mut stack: Vec<usize> = (0..degree.len()).filter(|&v| degree[v] == 1).collect();
        stack.reverse();
        while let Some(node) = stack.pop() {
            if degree[node] != 1 {
                continue;
            }
            let Some(&ci) = self.adj[node].iter().find(|&&ci| !done[ci]) else {
                continue;
            };
            done[ci] = true;
            let flow = rem[node];
            cells[ci].flow = flow.max(0.0);
            let other = if node < n { n + cells[ci].col } else { cells[ci].row };
            rem[other] -= flow;
            rem[node] = 0.0;
            degree[node] -= 1;
            degree[other] -= 1;
            if degree[other] == 1 {
                stack.push(other);
            }
        }
    }
}
