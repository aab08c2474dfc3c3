//! Nearest-rank percentiles over exact sorts.

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p * n)` (1-based), clamped to `[1, n]`. `None` for an empty slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    Some(sorted[rank - 1])
}

/// Sorts a copy of `values` and takes its nearest-rank percentile.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    nearest_rank(&v, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_values_lower_median() {
        assert_eq!(percentile(&[200.0, 100.0], 0.5), Some(100.0));
        assert_eq!(percentile(&[200.0, 100.0], 0.99), Some(200.0));
        assert_eq!(percentile(&[], 0.5), None);
        assert_eq!(percentile(&[7.0], 0.0), Some(7.0));
    }

    proptest! {
        #[test]
        fn matches_counting_oracle(mut xs in proptest::collection::vec(-1e6f64..1e6, 1..300), p in 0.0f64..=1.0) {
            let got = percentile(&xs, p).unwrap();
            // The nearest-rank value is the smallest sample with at least p*n samples <= it.
            xs.sort_by(f64::total_cmp);
            let n = xs.len() as f64;
            let oracle = xs
                .iter()
                .copied()
                .find(|&x| xs.iter().filter(|&&y| y <= x).count() as f64 >= (p * n).max(1.0))
                .unwrap();
            prop_assert_eq!(got, oracle);
        }

        #[test]
        fn monotone_in_p(xs in proptest::collection::vec(0f64..1e4, 1..200)) {
            let p50 = percentile(&xs, 0.5).unwrap();
            let p90 = percentile(&xs, 0.9).unwrap();
            let p99 = percentile(&xs, 0.99).unwrap();
            prop_assert!(p50 <= p90 && p90 <= p99);
        }
    }
}
