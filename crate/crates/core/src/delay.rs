//! Closed-form delay models for a single OPST and a single snowball tree.
//!
//! All delays are measured from the moment the tree root holds the chunk,
//! except the OPST figures, where the root is the sender itself and each of
//! the `N` receivers waits for its turn on the root's uplink.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::overlay::{depth_for, level_width};

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DelayModelError {
    #[error("mean delay must be >= 0, got {0}")]
    NegativeDelay(f64),
    #[error("transmission time must be > 0, got {0}")]
    NonPositiveTransmission(f64),
}

/// Mean propagation/queueing delay `d` and per-chunk transmission time `t`, both in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub d: f64,
    pub t: f64,
}

impl DelayModel {
    pub fn new(d: f64, t: f64) -> Result<Self, DelayModelError> {
        if !(d >= 0.0) {
            return Err(DelayModelError::NegativeDelay(d));
        }
        if !(t > 0.0) {
            return Err(DelayModelError::NonPositiveTransmission(t));
        }
        Ok(DelayModel { d, t })
    }
}

/// `(max, avg)` delay of a single sequential relay serving `n` receivers.
pub fn opst_delay(n: usize, m: DelayModel) -> (f64, f64) {
    assert!(n >= 1);
    let n = n as f64;
    (m.d + n * m.t, m.d + 0.5 * (n + 1.0) * m.t)
}

/// `(max, avg_bound)` for a snowball tree over `n` peers.
///
/// The average drops a lower-order term and is only an upper-bound style
/// comparator; use [`sbt_avg_exact_pow2`] for exact values.
pub fn sbt_delay(n: usize, m: DelayModel) -> (f64, f64) {
    assert!(n >= 2);
    let k = depth_for(n) as f64;
    (k * (m.d + m.t), 0.5 * k * m.d + (k - 1.0) * m.t)
}

/// Exact mean over all `2^K` peers (the root counts with delay 0).
pub fn sbt_avg_exact_pow2(depth: usize, m: DelayModel) -> f64 {
    assert!(depth >= 1);
    let k = depth as f64;
    0.5 * k * m.d + (k - 1.0) * m.t + m.t / (1u64 << depth) as f64
}

/// Closed-form mean delay of the peers at level `k >= 1`.
pub fn sbt_level_avg(k: usize, m: DelayModel) -> f64 {
    0.5 * (k as f64 + 1.0) * m.d + k as f64 * m.t
}

/// Level means from the recursion over parents: each of the `2^{(i-1)+}`
/// holders at level `i` hands its `(k-i)`-th back-to-back upload to level `k`.
/// Returns `[D_0, .., D_depth]` with `D_0 = 0`.
pub fn sbt_level_avgs_recursive(depth: usize, m: DelayModel) -> Vec<f64> {
    let mut out = vec![0.0f64];
    for k in 1..=depth {
        let total: f64 = (0..k)
            .map(|i| level_width(i) as f64 * (out[i] + m.d + (k - i) as f64 * m.t))
            .sum();
        out.push(total / level_width(k) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> DelayModel {
        DelayModel::new(1.0, 1.0).unwrap()
    }

    const EPS: f64 = 1e-12;

    #[test]
    fn opst_values() {
        assert_eq!(opst_delay(16, unit()), (17.0, 9.5));
        assert_eq!(opst_delay(1, DelayModel::new(0.0, 1.0).unwrap()), (1.0, 1.0));
        let (mx, avg) = opst_delay(16, DelayModel::new(1.0, 0.001).unwrap());
        assert!((mx - 1.016).abs() < EPS && (avg - 1.0085).abs() < EPS);
    }

    #[test]
    fn sbt_values() {
        assert_eq!(sbt_delay(16, unit()), (8.0, 5.0));
        assert_eq!(sbt_delay(2, unit()).0, 2.0);
        assert_eq!(sbt_avg_exact_pow2(4, unit()), 5.0625);
        assert_eq!(sbt_avg_exact_pow2(1, unit()), 1.0);
        assert_eq!(sbt_level_avg(3, unit()), 5.0);
    }

    #[test]
    fn recursion_matches_closed_form() {
        let m = DelayModel::new(0.37, 1.9).unwrap();
        let rec = sbt_level_avgs_recursive(16, m);
        for k in 1..=16 {
            assert!((rec[k] - sbt_level_avg(k, m)).abs() < 1e-9, "k = {k}");
        }
        for depth in 1..=16 {
            let n = (1u64 << depth) as f64;
            let mean = (1..=depth)
                .map(|k| level_width(k) as f64 * rec[k])
                .sum::<f64>()
                / n;
            assert!((mean - sbt_avg_exact_pow2(depth, m)).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_models() {
        assert!(DelayModel::new(-1.0, 1.0).is_err());
        assert!(DelayModel::new(0.0, 0.0).is_err());
        assert!(DelayModel::new(f64::NAN, 1.0).is_err());
    }
}
