//! Finite-difference slope of accuracy against pruning ratio.

use crate::error::{Error, Result};

/// Allowed gap between consecutive ratios and `delta`.
pub const GRID_TOLERANCE: f64 = 1e-12;

/// `(acc(r + delta) - acc(r)) / delta` at every grid point but the last.
///
/// `curve` holds `(ratio, accuracy)` pairs in any order; consecutive ratios
/// must differ by `delta`.
pub fn marginal_drop(curve: &[(f64, f64)], delta: f64) -> Result<Vec<(f64, f64)>> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::NonUniformGrid {
            delta,
            detail: "spacing must be positive".into(),
        });
    }
    let mut pts = curve.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in pts.windows(2) {
        let gap = w[1].0 - w[0].0;
        if (gap - delta).abs() > GRID_TOLERANCE {
            return Err(Error::NonUniformGrid {
                delta,
                detail: format!("{} -> {} steps by {gap}", w[0].0, w[1].0),
            });
        }
    }
    Ok(pts.windows(2).map(|w| (w[0].0, (w[1].1 - w[0].1) / delta)).collect())
}
