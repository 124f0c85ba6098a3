use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchAssignment {
    /// `(query, ground truth)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment on a `rows × cols` row-major matrix. Every row is
/// matched when `rows ≤ cols`, every column otherwise; the result has
/// `min(rows, cols)` pairs.
///
/// Shortest augmenting paths with row/column potentials, `O(r²·c)`.
pub fn hungarian_match(cost: &[f64], rows: usize, cols: usize) -> Result<MatchAssignment> {
    if cost.len() != rows * cols {
        return Err(Error::InvalidArgument(format!("cost has {} entries, expected {rows}x{cols}", cost.len())));
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite { row: i / cols.max(1), col: i % cols.max(1) });
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchAssignment::default());
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transposed { cost[j * cols + i] } else { cost[i * cols + j] };

    // 1-based arrays; column 0 is the virtual start of each augmenting path.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(n);
    let mut total = 0.0;
    for j in 1..=m {
        if owner[j] != 0 {
            let (r, c) = (owner[j] - 1, j - 1);
            total += at(r, c);
            pairs.push(if transposed { (c, r) } else { (r, c) });
        }
    }
    pairs.sort_unstable();
    Ok(MatchAssignment { pairs, total_cost: total })
}
