//! Exact solver for the transportation LP that serves as the linear
//! minimization oracle of the conditional gradient loop: minimize
//! `sum(cost .* C)` over matrices with unit row sums and column sums
//! `n/o`, `C >= 0`.
//!
//! The marginals are scaled by the column count so supplies and demands
//! become integers; flows then stay integral throughout the simplex
//! pivots, which keeps feasibility exact and makes degenerate pivots
//! safe. Entering and leaving variables follow Bland's rule (lowest
//! index), so the returned vertex is deterministic.

use alloc::vec;
use alloc::vec::Vec;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::math::abs;

/// Row and column sums of the correspondence polytope: every row sums to
/// one and every column to `rows/cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub row: Vec<f64>,
    pub col: Vec<f64>,
}

impl Marginals {
    /// Marginals for an `rows x cols` correspondence matrix.
    pub fn for_correspondence(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig {
                reason: alloc::string::String::from("marginals need at least one row and column"),
            });
        }
        Ok(Marginals {
            row: vec![1.0; rows],
            col: vec![rows as f64 / cols as f64; cols],
        })
    }

    pub fn rows(&self) -> usize {
        self.row.len()
    }

    pub fn cols(&self) -> usize {
        self.col.len()
    }
}

/// A vertex of the transportation polytope together with its objective
/// value. At most `rows + cols - 1` entries are nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub values: Array2<f64>,
    pub objective: f64,
}

fn check_cost(cost: ArrayView2<'_, f64>, m: &Marginals) -> Result<()> {
    if cost.nrows() != m.rows() || cost.ncols() != m.cols() {
        return Err(Error::DimensionMismatch {
            context: "cost matrix shape",
            expected: m.rows() * m.cols(),
            found: cost.nrows() * cost.ncols(),
        });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "transportation cost matrix",
        });
    }
    Ok(())
}

fn objective_of(cost: ArrayView2<'_, f64>, values: &Array2<f64>) -> f64 {
    cost.iter().zip(values.iter()).map(|(c, x)| c * x).sum()
}

/// Solves the transportation LP exactly, returning an optimal vertex.
pub fn solve_transportation(cost: ArrayView2<'_, f64>, m: &Marginals) -> Result<TransportPlan> {
    check_cost(cost, m)?;
    let rows = m.rows();
    let cols = m.cols();
    // Scale row marginal 1 -> cols, column marginal rows/cols -> rows.
    let supplies = vec![cols as i64; rows];
    let demands = vec![rows as i64; cols];
    let flow = simplex_integer(cost, &supplies, &demands)?;
    let scale = cols as f64;
    let values = flow.mapv(|f| f as f64 / scale);
    let objective = objective_of(cost, &values);
    Ok(TransportPlan { values, objective })
}

/// Transportation simplex with integer supplies/demands. Returns the
/// integral optimal flow.
fn simplex_integer(
    cost: ArrayView2<'_, f64>,
    supplies: &[i64],
    demands: &[i64],
) -> Result<Array2<i64>> {
    let m = supplies.len();
    let n = demands.len();
    let mut flow = Array2::<i64>::zeros((m, n));
    let mut basic = Array2::<bool>::default((m, n));

    // Northwest-corner initial basis: exactly m + n - 1 cells, possibly
    // with zero flow.
    {
        let mut rs = supplies.to_vec();
        let mut rd = demands.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let q = rs[i].min(rd[j]);
            flow[[i, j]] = q;
            basic[[i, j]] = true;
            rs[i] -= q;
            rd[j] -= q;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if rs[i] == 0 && i < m - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let scale = cost.iter().fold(0.0f64, |acc, &c| acc.max(abs(c)));
    let eps = 1e-11 * scale;
    let limit = 1000 + 100 * m * n;

    for _pivot in 0..limit {
        let (u, v) = potentials(cost, &basic, m, n);
        // Bland's rule: lowest (row-major) index with negative reduced cost.
        let mut entering = None;
        'scan: for i in 0..m {
            for j in 0..n {
                if !basic[[i, j]] && cost[[i, j]] - u[i] - v[j] < -eps {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let (ei, ej) = match entering {
            Some(cell) => cell,
            None => return Ok(flow),
        };

        let cycle = cycle_through(&basic, m, n, ei, ej);
        // Odd positions along the cycle lose flow.
        let mut theta = i64::MAX;
        let mut leaving = (usize::MAX, usize::MAX);
        for (pos, &(i, j)) in cycle.iter().enumerate() {
            if pos % 2 == 1 {
                let f = flow[[i, j]];
                if f < theta || (f == theta && (i, j) < leaving) {
                    theta = f;
                    leaving = (i, j);
                }
            }
        }
        for (pos, &(i, j)) in cycle.iter().enumerate() {
            if pos % 2 == 1 {
                flow[[i, j]] -= theta;
            } else {
                flow[[i, j]] += theta;
            }
        }
        basic[[ei, ej]] = true;
        basic[[leaving.0, leaving.1]] = false;
        flow[[leaving.0, leaving.1]] = 0;
    }
    Err(Error::PivotLimit { limit })
}

/// Dual potentials on the spanning-tree basis, anchored at row 0.
fn potentials(
    cost: ArrayView2<'_, f64>,
    basic: &Array2<bool>,
    m: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let mut u_known = vec![false; m];
    let mut v_known = vec![false; n];
    u_known[0] = true;
    // Nodes 0..m are rows, m..m+n are columns.
    let mut queue: Vec<usize> = vec![0];
    while let Some(node) = queue.pop() {
        if node < m {
            for j in 0..n {
                if basic[[node, j]] && !v_known[j] {
                    v[j] = cost[[node, j]] - u[node];
                    v_known[j] = true;
                    queue.push(m + j);
                }
            }
        } else {
            let j = node - m;
            for i in 0..m {
                if basic[[i, j]] && !u_known[i] {
                    u[i] = cost[[i, j]] - v[j];
                    u_known[i] = true;
                    queue.push(i);
                }
            }
        }
    }
    (u, v)
}

/// The unique cycle created by adding `(ei, ej)` to the basis tree,
/// starting with the entering cell. Found by walking the tree path from
/// column node `ej` back to row node `ei`.
fn cycle_through(
    basic: &Array2<bool>,
    m: usize,
    n: usize,
    ei: usize,
    ej: usize,
) -> Vec<(usize, usize)> {
    let total = m + n;
    let mut parent = vec![usize::MAX; total];
    let mut seen = vec![false; total];
    let start = m + ej;
    let goal = ei;
    seen[start] = true;
    let mut stack = vec![start];
    while let Some(node) = stack.pop() {
        if node == goal {
            break;
        }
        if node < m {
            for j in 0..n {
                let next = m + j;
                if basic[[node, j]] && !seen[next] {
                    seen[next] = true;
                    parent[next] = node;
                    stack.push(next);
                }
            }
        } else {
            let j = node - m;
            for i in 0..m {
                if basic[[i, j]] && !seen[i] {
                    seen[i] = true;
                    parent[i] = node;
                    stack.push(i);
                }
            }
        }
    }
    assert!(seen[goal], "basis tree must connect all nodes");

    // Path nodes goal -> start, then edges as cells.
    let mut nodes = vec![goal];
    let mut cur = goal;
    while cur != start {
        cur = parent[cur];
        nodes.push(cur);
    }
    nodes.reverse(); // start (col ej) ... goal (row ei)

    let mut cycle = vec![(ei, ej)];
    for pair in nodes.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let cell = if a < m { (a, b - m) } else { (b, a - m) };
        cycle.push(cell);
    }
    cycle
}

/// Brute-force guard: instances above this many cells are rejected.
pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Exact optimum by enumerating every basic feasible solution (spanning
/// tree of the bipartite supply/demand graph). Test oracle only; guarded
/// to tiny instances.
pub fn brute_force_transportation(
    cost: ArrayView2<'_, f64>,
    m: &Marginals,
) -> Result<TransportPlan> {
    check_cost(cost, m)?;
    let rows = m.rows();
    let cols = m.cols();
    let cells = rows * cols;
    if cells > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeGuard {
            size: cells,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let supplies = vec![cols as i64; rows];
    let demands = vec![rows as i64; cols];
    let basis_size = rows + cols - 1;
    let scale = cols as f64;

    let mut best: Option<(f64, Array2<f64>)> = None;
    for mask in 0u32..(1u32 << cells) {
        if mask.count_ones() as usize != basis_size {
            continue;
        }
        if let Some(flow) = tree_flow(mask, cost.dim(), &supplies, &demands) {
            let values = flow.mapv(|f| f as f64 / scale);
            let obj = objective_of(cost, &values);
            let better = match &best {
                None => true,
                Some((b, _)) => obj < *b,
            };
            if better {
                best = Some((obj, values));
            }
        }
    }
    let (objective, values) = best.expect("transportation polytope is never empty");
    Ok(TransportPlan { values, objective })
}

/// Solves the flows of a candidate basis by leaf peeling; `None` if the
/// cells do not form a spanning tree or force negative flow.
fn tree_flow(
    mask: u32,
    (m, n): (usize, usize),
    supplies: &[i64],
    demands: &[i64],
) -> Option<Array2<i64>> {
    let mut degree = vec![0usize; m + n];
    let mut balance: Vec<i64> = supplies
        .iter()
        .copied()
        .chain(demands.iter().map(|d| -d))
        .collect();
    let mut present = Array2::<bool>::default((m, n));
    for i in 0..m {
        for j in 0..n {
            if mask & (1 << (i * n + j)) != 0 {
                present[[i, j]] = true;
                degree[i] += 1;
                degree[m + j] += 1;
            }
        }
    }
    if degree.iter().any(|&d| d == 0) {
        return None;
    }
    let mut flow = Array2::<i64>::zeros((m, n));
    let mut leaves: Vec<usize> = (0..m + n).filter(|&v| degree[v] == 1).collect();
    let mut remaining = m + n - 1;
    while let Some(node) = leaves.pop() {
        if degree[node] == 0 {
            continue;
        }
        // The single remaining incident cell.
        let mut found = None;
        if node < m {
            for j in 0..n {
                if present[[node, j]] {
                    found = Some((node, j));
                    break;
                }
            }
        } else {
            let j = node - m;
            for i in 0..m {
                if present[[i, j]] {
                    found = Some((i, j));
                    break;
                }
            }
        }
        let (i, j) = found?;
        let f = if node < m { balance[i] } else { -balance[m + j] };
        if f < 0 {
            return None;
        }
        flow[[i, j]] = f;
        present[[i, j]] = false;
        degree[i] -= 1;
        degree[m + j] -= 1;
        balance[i] -= f;
        balance[m + j] += f;
        remaining -= 1;
        if degree[i] == 1 {
            leaves.push(i);
        }
        if degree[m + j] == 1 {
            leaves.push(m + j);
        }
    }
    // A spanning tree peels down to nothing; a disconnected edge set
    // leaves a cycle or unbalanced component behind.
    if remaining != 0 || balance.iter().any(|&b| b != 0) {
        return None;
    }
    Some(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forced_diagonal_optimum() {
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        let m = Marginals::for_correspondence(2, 2).unwrap();
        let plan = solve_transportation(cost.view(), &m).unwrap();
        assert_eq!(plan.values, array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(plan.objective, 0.0);
    }

    #[test]
    fn constant_cost_objective_is_marginal_determined() {
        let cost = Array2::from_elem((3, 5), 2.5);
        let m = Marginals::for_correspondence(3, 5).unwrap();
        let plan = solve_transportation(cost.view(), &m).unwrap();
        assert!((plan.objective - 2.5 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_row_instance_spreads_per_column_marginals() {
        let cost = array![[3.0, -1.0, 0.5, 2.0]];
        let m = Marginals::for_correspondence(1, 4).unwrap();
        let plan = solve_transportation(cost.view(), &m).unwrap();
        for j in 0..4 {
            assert!((plan.values[[0, j]] - 0.25).abs() < 1e-15);
        }
        let brute = brute_force_transportation(cost.view(), &m).unwrap();
        assert!((plan.objective - brute.objective).abs() < 1e-12);
    }

    #[test]
    fn brute_force_guard_rejects_large_instances() {
        let cost = Array2::zeros((3, 7));
        let m = Marginals::for_correspondence(3, 7).unwrap();
        assert_eq!(
            brute_force_transportation(cost.view(), &m).unwrap_err(),
            Error::SizeGuard {
                size: 21,
                limit: BRUTE_FORCE_LIMIT
            }
        );
    }

    #[test]
    fn non_finite_cost_is_rejected() {
        let cost = array![[0.0, f64::NAN], [1.0, 0.0]];
        let m = Marginals::for_correspondence(2, 2).unwrap();
        assert!(matches!(
            solve_transportation(cost.view(), &m),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn feasibility_and_support_bound_hold() {
        let cost = array![
            [0.3, -2.0, 1.1, 0.0, 4.0],
            [1.0, 0.2, -0.7, 2.2, 0.1],
            [-1.5, 0.9, 0.4, 0.6, 1.3]
        ];
        let m = Marginals::for_correspondence(3, 5).unwrap();
        let plan = solve_transportation(cost.view(), &m).unwrap();
        for i in 0..3 {
            let row_sum: f64 = plan.values.row(i).sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
        }
        for j in 0..5 {
            let col_sum: f64 = plan.values.column(j).sum();
            assert!((col_sum - 3.0 / 5.0).abs() < 1e-9);
        }
        assert!(plan.values.iter().all(|&x| x >= 0.0));
        let nonzero = plan.values.iter().filter(|&&x| x != 0.0).count();
        assert!(nonzero <= 3 + 5 - 1);
    }
}
