//! Top-k state selection and the scatter matrix that undoes it.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Slack added before flooring `N (1 - r)`, so decimal ratios such as 0.9
/// that land a rounding error below an integer keep the intended count.
pub const KEEP_SNAP: f64 = 1e-9;

pub fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::RatioOutOfRange(ratio))
    }
}

/// Number of states kept out of `n` at pruning ratio `ratio`.
pub fn keep_count(n: usize, ratio: f64) -> Result<usize> {
    check_ratio(ratio)?;
    let k = (n as f64 * (1.0 - ratio) + KEEP_SNAP).floor() as usize;
    if k == 0 {
        return Err(Error::RatioTooAggressive { ratio, n });
    }
    Ok(k.min(n))
}

/// Indices ordered by score, highest first; equal scores by lower index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// The `floor(N (1 - r))` highest-scoring states, in ascending index order.
pub fn select_states(scores: &[f64], ratio: f64) -> Result<Vec<usize>> {
    if let Some(s) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::format("activity scores", format!("score {s} is not finite")));
    }
    let k = keep_count(scores.len(), ratio)?;
    let mut keep = rank_desc(scores);
    keep.truncate(k);
    keep.sort_unstable();
    Ok(keep)
}

/// `N x k` matrix with `bridge[keep[j], j] = 1`.
pub fn make_bridge<T: Scalar>(keep: &[usize], n: usize) -> Result<Array2<T>> {
    let mut seen = vec![false; n];
    for &s in keep {
        if s >= n {
            return Err(Error::PlanMismatch(format!("state {s} out of range for {n} states")));
        }
        if std::mem::replace(&mut seen[s], true) {
            return Err(Error::DuplicateIndex(s));
        }
    }
    let mut bridge = Array2::from_elem((n, keep.len()), T::zero());
    for (j, &s) in keep.iter().enumerate() {
        bridge[[s, j]] = T::one();
    }
    Ok(bridge)
}
