//! Nearest-rank percentiles.

use crate::scalar::{cmp_finite, Scalar};

/// Nearest-rank percentile of an ascending-sorted slice.
///
/// The rank is `ceil(p/100 * N)` (1-based) clamped to `[1, N]`, so `p = 0` yields the
/// minimum and `p = 100` the maximum. Returns `None` for an empty slice.
pub fn nearest_rank_sorted<T: Copy>(sorted: &[T], p: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

/// Sorts a copy of `samples` and returns its nearest-rank percentile.
pub fn nearest_rank<T: Scalar>(samples: &[T], p: f64) -> Option<T> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| cmp_finite(*a, *b));
    nearest_rank_sorted(&sorted, p)
}

pub fn mean<T: Scalar>(samples: &[T]) -> Option<T> {
    if samples.is_empty() {
        return None;
    }
    let sum: T = samples.iter().copied().sum();
    Some(sum / T::from_usize(samples.len()).expect("length representable"))
}
