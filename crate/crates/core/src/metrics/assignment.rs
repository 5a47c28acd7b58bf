//! Minimum-cost bipartite assignment (Hungarian method with potentials).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Solves the rectangular assignment problem on a row-major `rows x cols`
/// cost matrix. Every row is matched when `rows <= cols`, every column
/// otherwise.
///
/// Runs in O(n^2 m) with `n = min(rows, cols)`. Scans use strict
/// comparisons, so among equal-cost alternatives the lowest index wins.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Assignment {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Assignment { pairs: Vec::new(), total_cost: 0.0 };
    }
    debug_assert!(cost.iter().all(|r| r.len() == cols), "ragged cost matrix");

    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transposed { cost[j][i] } else { cost[i][j] };

    // 1-based arrays, index 0 is the virtual column
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
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

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (r, c) = (owner[j] - 1, j - 1);
            if transposed {
                (c, r)
            } else {
                (r, c)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Assignment { pairs, total_cost }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injections of the smaller side.
    pub(crate) fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        let rows = cost.len();
        let cols = cost.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return 0.0;
        }
        fn rec(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, transposed: bool) -> f64 {
            let n = if transposed { cost[0].len() } else { cost.len() };
            if r == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..used.len() {
                if used[c] {
                    continue;
                }
                used[c] = true;
                let here = if transposed { cost[c][r] } else { cost[r][c] };
                best = best.min(here + rec(cost, r + 1, used, transposed));
                used[c] = false;
            }
            best
        }
        let transposed = rows > cols;
        let mut used = vec![false; if transposed { rows } else { cols }];
        rec(cost, 0, &mut used, transposed)
    }

    #[test]
    fn small_examples() {
        let a = hungarian_match(&[vec![0.0, 9.0], vec![9.0, 0.0]]);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);

        let b = hungarian_match(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert_eq!(b.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(b.total_cost, 2.0);

        let c = hungarian_match(&[vec![5.0, 1.0, 3.0]]);
        assert_eq!(c.pairs, vec![(0, 1)]);
        assert_eq!(c.total_cost, 1.0);

        let d = hungarian_match(&[vec![5.0], vec![1.0], vec![3.0]]);
        assert_eq!(d.pairs, vec![(1, 0)]);

        let e = hungarian_match(&[]);
        assert!(e.pairs.is_empty());
        assert_eq!(e.total_cost, 0.0);
    }

    #[test]
    fn ties_prefer_lowest_indices() {
        let a = hungarian_match(&[vec![1.0, 1.0, 1.0]]);
        assert_eq!(a.pairs, vec![(0, 0)]);
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let rows = rng.gen_range(1..=6);
            let cols = rng.gen_range(1..=6);
            let cost: Vec<Vec<f64>> =
                (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-5.0..10.0)).collect()).collect();
            let a = hungarian_match(&cost);
            assert_eq!(a.pairs.len(), rows.min(cols));
            let mut rs: Vec<_> = a.pairs.iter().map(|p| p.0).collect();
            let mut cs: Vec<_> = a.pairs.iter().map(|p| p.1).collect();
            rs.dedup();
            cs.sort_unstable();
            cs.dedup();
            assert_eq!(rs.len(), a.pairs.len());
            assert_eq!(cs.len(), a.pairs.len());
            assert!((a.total_cost - brute_force_min(&cost)).abs() < 1e-9);
        }
    }
}
