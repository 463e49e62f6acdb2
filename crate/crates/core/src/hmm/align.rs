//! Label-switching resolution and aligned error metrics.

use crate::error::{Error, Result};
use crate::hmm::HmmParams;

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian
/// method with potentials, O(n³)). Returns `assign[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("assignment cost matrix must be square".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidValue("assignment costs must be finite".into()));
    }
    // 1-based rows/columns; column 0 is a sentinel.
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
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    Ok(assign)
}

/// Permutation `perm[estimated] = true` minimizing the total squared
/// distance between matched emission means.
pub fn align_states(est_means: &[[f64; 2]], true_means: &[[f64; 2]]) -> Result<Vec<usize>> {
    if est_means.len() != true_means.len() {
        return Err(Error::Shape(format!(
            "aligning {} estimated states to {} true states",
            est_means.len(),
            true_means.len()
        )));
    }
    let cost: Vec<Vec<f64>> = est_means
        .iter()
        .map(|e| {
            true_means
                .iter()
                .map(|t| (e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2))
                .collect()
        })
        .collect();
    hungarian(&cost)
}

/// Mean over true-state rows of the total-variation distance between the
/// relabelled estimated transition row and the true row.
pub fn transition_error(est: &HmmParams, truth: &HmmParams, perm: &[usize]) -> Result<f64> {
    let s = truth.states();
    if est.states() != s || perm.len() != s {
        return Err(Error::Shape("transition_error needs equal state counts".into()));
    }
    let mut relabelled = vec![vec![0.0; s]; s];
    for (i, row) in est.transition.iter().enumerate() {
        for (j, p) in row.iter().enumerate() {
            relabelled[perm[i]][perm[j]] = *p;
        }
    }
    let total: f64 = relabelled
        .iter()
        .zip(&truth.transition)
        .map(|(e, t)| 0.5 * e.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum();
    Ok(total / s as f64)
}

/// Fraction of steps whose relabelled decoded state equals the true state.
pub fn state_accuracy(decoded: &[Vec<usize>], truth: &[Vec<usize>], perm: &[usize]) -> f64 {
    let (mut hits, mut n) = (0usize, 0usize);
    for (d, t) in decoded.iter().zip(truth) {
        for (a, b) in d.iter().zip(t) {
            hits += usize::from(perm[*a] == *b);
            n += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        hits as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(rows: Vec<Vec<f64>>) -> HmmParams {
        let s = rows.len();
        HmmParams {
            initial: vec![1.0 / s as f64; s],
            transition: rows,
            means: vec![[0.0, 0.0]; s],
            obs_sd: 1.0,
        }
    }

    #[test]
    fn identical_means_align_to_identity() {
        let m = [[0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]];
        assert_eq!(align_states(&m, &m).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn swapped_pair_aligns_to_transposition() {
        let a = [[0.0, 1.0], [1.0, 0.0]];
        let b = [[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(align_states(&a, &b).unwrap(), vec![1, 0]);
    }

    #[test]
    fn uniform_rows_against_identity() {
        let uniform = params(vec![vec![0.25; 4]; 4]);
        let ident = params((0..4).map(|r| (0..4).map(|c| f64::from(u8::from(r == c))).collect()).collect());
        let e = transition_error(&uniform, &ident, &[0, 1, 2, 3]).unwrap();
        assert!((e - 0.75).abs() < 1e-15);
        assert_eq!(transition_error(&ident, &ident, &[0, 1, 2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn permutation_relabels_both_axes() {
        let est = params(vec![vec![0.9, 0.1], vec![0.3, 0.7]]);
        let truth = params(vec![vec![0.7, 0.3], vec![0.1, 0.9]]);
        assert!(transition_error(&est, &truth, &[1, 0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn accuracy_counts_relabelled_hits() {
        let acc = state_accuracy(&[vec![0, 1, 1]], &[vec![1, 0, 1]], &[1, 0]);
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }
}
