//! Minimum-cost bipartite assignment.

use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(row, column)` pairs sorted by row; `min(R, C)` of them.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub total_cost: f64,
}

/// Solves the assignment problem on an `R x C` cost matrix. Rectangular
/// inputs are padded to square with a constant above every real cost, then
/// solved with the shortest-augmenting-path form of the Kuhn-Munkres method.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult, TrainError> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(TrainError::Assignment("empty cost matrix".into()));
    }
    if cost.iter().any(|r| r.len() != cols) {
        return Err(TrainError::Assignment("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(TrainError::Assignment("non-finite cost".into()));
    }
    let n = rows.max(cols);
    let pad = cost.iter().flatten().fold(0.0f64, |m, c| m.max(c.abs())) + 1.0;
    let at = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { pad };

    // 1-based potentials and column assignment; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
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
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter_map(|j| {
            let i = owner[j] - 1;
            (i < rows && j - 1 < cols).then_some((i, j - 1))
        })
        .collect();
    pairs.sort_unstable();
    let matched: Vec<bool> = (0..rows).map(|i| pairs.iter().any(|p| p.0 == i)).collect();
    let unmatched_rows = (0..rows).filter(|&i| !matched[i]).collect();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(MatchResult {
        pairs,
        unmatched_rows,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum over injections of the smaller side into the larger.
    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let (r, c) = (cost.len(), cost[0].len());
        let t: Vec<Vec<f64>> = if r <= c {
            cost.to_vec()
        } else {
            (0..c).map(|j| (0..r).map(|i| cost[i][j]).collect()).collect()
        };
        fn go(t: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == t.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(t[row][j] + go(t, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(&t, 0, &mut vec![false; t[0].len()])
    }

    #[test]
    fn hand_cases() {
        let m = hungarian(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(m.pairs, [(0, 1), (1, 0)]);
        assert_eq!(m.total_cost, 4.0);
        let diag = vec![vec![1.0, 9.0, 9.0], vec![9.0, 1.0, 9.0], vec![9.0, 9.0, 1.0]];
        assert_eq!(hungarian(&diag).unwrap().pairs, [(0, 0), (1, 1), (2, 2)]);
        let row = hungarian(&[vec![5.0, 1.0, 7.0]]).unwrap();
        assert_eq!(row.pairs, [(0, 1)]);
        let col = hungarian(&[vec![5.0], vec![1.0], vec![7.0]]).unwrap();
        assert_eq!(col.pairs, [(1, 0)]);
        assert_eq!(col.unmatched_rows, [0, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian(&[]).is_err());
        assert!(hungarian(&[vec![]]).is_err());
        assert!(hungarian(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
    }

    proptest! {
        #[test]
        fn agrees_with_brute_force(
            (r, c, vals) in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-5.0..10.0f64, r * c)))
        ) {
            let cost: Vec<Vec<f64>> = vals.chunks(c).map(<[f64]>::to_vec).collect();
            let m = hungarian(&cost).unwrap();
            prop_assert_eq!(m.pairs.len(), r.min(c));
            let mut rows_seen = std::collections::BTreeSet::new();
            let mut cols_seen = std::collections::BTreeSet::new();
            for &(i, j) in &m.pairs {
                prop_assert!(rows_seen.insert(i) && cols_seen.insert(j));
            }
            prop_assert!((m.total_cost - brute_force(&cost)).abs() < 1e-9);
        }
    }
}
