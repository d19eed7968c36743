//! Rectangular linear assignment with forbidden cells.

/// Minimum-cost matching of maximum cardinality.
///
/// `cost[r][c]` is `None` for forbidden pairs. Returns `(row, col)` pairs in
/// row order. Among all matchings with the largest number of allowed pairs
/// the one with the smallest total cost is returned.
pub fn hungarian(cost: &[Vec<Option<f64>>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    assert!(cost.iter().all(|r| r.len() == cols), "ragged cost matrix");
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let finite: f64 = cost.iter().flatten().flatten().map(|c| c.abs()).sum();
    let big = 1.0 + finite;
    let n = rows.max(cols);
    let at = |r: usize, c: usize| -> f64 {
        if r < rows && c < cols {
            cost[r][c].unwrap_or(big)
        } else {
            big
        }
    };

    // Potentials formulation, 1-based with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
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
            for j in 0..=n {
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
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter_map(|j| {
            let (r, c) = (p[j] - 1, j - 1);
            (r < rows && c < cols && cost[r][c].is_some()).then_some((r, c))
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Total cost of `pairs` under `cost`.
pub fn matching_cost(cost: &[Vec<Option<f64>>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r][c].expect("allowed pair")).sum()
}
