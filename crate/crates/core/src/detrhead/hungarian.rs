//! Minimum-cost injective assignment (shortest augmenting path with
//! potentials, `O(n²m)`).

use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// Assignment of every row (ground truth) to a distinct column (prediction).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(gt_index, pred_index)`, sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl MatchResult {
    pub fn pred_for_gt(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == gt).map(|p| p.1)
    }

    pub fn is_matched_pred(&self, pred: usize) -> bool {
        self.pairs.iter().any(|p| p.1 == pred)
    }
}

/// `cost` is `rows × cols` with `rows <= cols`.
pub fn solve(cost: &Mat) -> Result<MatchResult> {
    let (n, m) = cost.dim();
    if n > m {
        return Err(Error::Invalid(format!(
            "{n} ground-truth moments but only {m} prediction slots"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Invalid("matching cost is not finite".into()));
    }
    if n == 0 {
        return Ok(MatchResult {
            pairs: vec![],
            cost: 0.0,
        });
    }
    // 1-based arrays; column 0 is a virtual start.
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
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[[i, j]]).sum();
    Ok(MatchResult { pairs, cost: total })
}
