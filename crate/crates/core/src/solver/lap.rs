//! Linear assignment with forbidden pairs and bipartite matching.

use nalgebra::DMatrix;

/// Minimum-cost assignment of every row to a distinct column (`rows ≤ cols`).
/// Pairs with `allowed(i, j) == false` are forbidden. Returns the column per
/// row and the total cost, or `None` when no complete assignment exists.
pub fn min_cost_assignment(cost: &DMatrix<f64>, allowed: impl Fn(usize, usize) -> bool) -> Option<(Vec<usize>, f64)> {
    let (n, m) = cost.shape();
    if n == 0 {
        return Some((Vec::new(), 0.0));
    }
    if n > m {
        return None;
    }
    let inf = f64::INFINITY;
    // potentials and matching, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                if allowed(i0 - 1, j - 1) {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if !delta.is_finite() {
                return None;
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    let total = cols.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Some((cols, total))
}

/// Maximum bipartite matching by augmenting paths. `adj[i]` lists the
/// columns row `i` may take. Returns the size and the column per row.
pub fn max_matching(adj: &[Vec<usize>], num_cols: usize) -> (usize, Vec<Option<usize>>) {
    let mut col_owner: Vec<Option<usize>> = vec![None; num_cols];
    let mut row_col: Vec<Option<usize>> = vec![None; adj.len()];
    fn augment(
        i: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        col_owner: &mut [Option<usize>],
        row_col: &mut [Option<usize>],
    ) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            let free = match col_owner[j] {
                None => true,
                Some(k) => augment(k, adj, seen, col_owner, row_col),
            };
            if free {
                col_owner[j] = Some(i);
                row_col[i] = Some(j);
                return true;
            }
        }
        false
    }
    let mut size = 0;
    for i in 0..adj.len() {
        let mut seen = vec![false; num_cols];
        if augment(i, adj, &mut seen, &mut col_owner, &mut row_col) {
            size += 1;
        }
    }
    (size, row_col)
}

/// Maximum-weight matching that may leave rows and columns unmatched; only
/// allowed pairs with positive weight are used.
pub fn max_weight_partial_matching(weight: &DMatrix<f64>, allowed: impl Fn(usize, usize) -> bool) -> Vec<Option<usize>> {
    let (n, m) = weight.shape();
    let size = n + m;
    // rows: sources then target dummies; columns: targets then source dummies
    let mut cost = DMatrix::zeros(size, size);
    let mut ok = vec![false; size * size];
    for i in 0..n {
        for j in 0..m {
            if allowed(i, j) && weight[(i, j)] > 0.0 {
                cost[(i, j)] = -weight[(i, j)];
                ok[i * size + j] = true;
            }
        }
        ok[i * size + m + i] = true;
    }
    for j in 0..m {
        ok[(n + j) * size + j] = true;
        for i in 0..n {
            ok[(n + j) * size + m + i] = true;
        }
    }
    let (cols, _) = min_cost_assignment(&cost, |r, c| ok[r * size + c]).expect("dummy completion always exists");
    (0..n).map(|i| (cols[i] < m).then_some(cols[i])).collect()
}
