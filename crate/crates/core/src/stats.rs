//! Interval estimates and latency summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normal quantile for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("bad counts: {successes} successes out of {trials} trials")]
    BadCounts { successes: u64, trials: u64 },
}

/// Wilson score interval `(low, high)` for `successes` out of `n` trials,
/// clamped to `[0, 1]`.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> Result<(f64, f64), StatsError> {
    if n == 0 || successes > n {
        return Err(StatsError::BadCounts {
            successes,
            trials: n,
        });
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// A proportion with its 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub successes: u64,
    pub trials: u64,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateEstimate {
    /// Zero trials give point 0 with the uninformative interval `(0, 1)`.
    pub fn new(successes: u64, trials: u64) -> Self {
        assert!(successes <= trials, "{successes} successes out of {trials} trials");
        let (ci_low, ci_high) = wilson_interval(successes, trials, Z_95).unwrap_or((0.0, 1.0));
        let point = if trials == 0 { 0.0 } else { successes as f64 / trials as f64 };
        RateEstimate {
            successes,
            trials,
            point,
            ci_low,
            ci_high,
        }
    }

    /// Larger of the two distances from the point estimate to the interval
    /// ends.
    pub fn half_width(&self) -> f64 {
        (self.point - self.ci_low).max(self.ci_high - self.point)
    }

    /// True when the two intervals share no point.
    pub fn disjoint_from(&self, other: &RateEstimate) -> bool {
        self.ci_high < other.ci_low || other.ci_high < self.ci_low
    }
}

/// Inclusive-method quantile: linear interpolation at rank `(n − 1)·q` of the
/// sorted sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    assert!((0.0..=1.0).contains(&q), "quantile level outside [0, 1]");
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Median and interquartile range of a latency sample, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

impl LatencySummary {
    /// `None` for an empty sample.
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&sorted, 0.25);
        let q3 = quantile_sorted(&sorted, 0.75);
        Some(LatencySummary {
            n: sorted.len(),
            median: quantile_sorted(&sorted, 0.5),
            q1,
            q3,
            iqr: q3 - q1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wilson_zero_of_hundred() {
        // Upper end for zero successes reduces to z²/(n + z²).
        let z2 = Z_95 * Z_95;
        let oracle = z2 / (100.0 + z2);
        let (lo, hi) = wilson_interval(0, 100, Z_95).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - oracle).abs() < 1e-12);
        assert!((hi - 0.0370).abs() <= 1e-4);
    }

    #[test]
    fn wilson_all_successes_mirrors_zero() {
        let (lo, hi) = wilson_interval(100, 100, Z_95).unwrap();
        let (lo0, hi0) = wilson_interval(0, 100, Z_95).unwrap();
        assert!((hi - 1.0).abs() < 1e-12);
        assert!((lo - (1.0 - hi0)).abs() < 1e-12);
        assert_eq!(lo0, 0.0);
    }

    #[test]
    fn wilson_half() {
        // Symmetric around 0.5; half-width from the closed form.
        let (lo, hi) = wilson_interval(50, 100, Z_95).unwrap();
        let z2 = Z_95 * Z_95;
        let half = Z_95 * (0.25 / 100.0 + z2 / 40_000.0).sqrt() / (1.0 + z2 / 100.0);
        assert!((0.5 - lo - half).abs() < 1e-12);
        assert!((hi - 0.5 - half).abs() < 1e-12);
    }

    #[test]
    fn bad_counts_rejected() {
        assert!(wilson_interval(1, 0, Z_95).is_err());
        assert!(wilson_interval(5, 4, Z_95).is_err());
    }

    #[test]
    fn widths_shrink_like_inverse_sqrt() {
        let w = |n: u64| {
            let (lo, hi) = wilson_interval(n / 10, n, Z_95).unwrap();
            hi - lo
        };
        let (a, b, c) = (w(100), w(1000), w(10_000));
        let r = 10f64.sqrt();
        assert!((a / b - r).abs() < 0.25 && (b / c - r).abs() < 0.1);
    }

    #[test]
    fn single_sample_summary() {
        let s = LatencySummary::from_samples(&[42.0]).unwrap();
        assert_eq!((s.median, s.iqr), (42.0, 0.0));
    }

    #[test]
    fn quartiles_inclusive_method() {
        let s = LatencySummary::from_samples(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3, s.iqr), (2.0, 3.0, 4.0, 2.0));
        let s = LatencySummary::from_samples(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
        assert!(LatencySummary::from_samples(&[]).is_none());
    }

    #[test]
    fn disjointness() {
        let a = RateEstimate::new(10, 1000);
        let b = RateEstimate::new(300, 1000);
        assert!(a.disjoint_from(&b));
        assert!(!a.disjoint_from(&RateEstimate::new(12, 1000)));
    }

    proptest! {
        #[test]
        fn wilson_contains_point_estimate(n in 1u64..5000, frac in 0.0f64..=1.0) {
            let k = ((n as f64) * frac).floor() as u64;
            let (lo, hi) = wilson_interval(k, n, Z_95).unwrap();
            let p = k as f64 / n as f64;
            prop_assert!(0.0 <= lo && lo <= p + 1e-12);
            prop_assert!(p <= hi + 1e-12 && hi <= 1.0);
        }
    }
}
