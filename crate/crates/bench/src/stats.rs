//! Order statistics for aggregating per-run values.

use serde::Serialize;

/// Nearest-rank percentile: the `⌈p N⌉`-th smallest value, so every result
/// is one of the inputs. `p` is clamped to `(0, 1]`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p * sorted.len() as f64).ceil().clamp(1.0, sorted.len() as f64) as usize;
    Some(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Median with 10th and 90th percentiles; `None` for an empty sample.
pub fn spread(values: &[f64]) -> Option<Spread> {
    Some(Spread {
        median: percentile(values, 0.5)?,
        p10: percentile(values, 0.1)?,
        p90: percentile(values, 0.9)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_count_is_the_middle_value() {
        assert_eq!(percentile(&[5.0, 1.0, 3.0], 0.5), Some(3.0));
        assert_eq!(percentile(&[7.0; 5], 0.5), Some(7.0));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn percentiles_are_order_statistics() {
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        let s = spread(&xs).unwrap();
        assert_eq!((s.p10, s.median, s.p90), (2.0, 10.0, 18.0));
        assert_eq!(percentile(&xs, 0.0), Some(1.0));
        assert_eq!(percentile(&xs, 1.0), Some(20.0));
        assert_eq!(spread(&[4.0]).unwrap(), Spread { median: 4.0, p10: 4.0, p90: 4.0 });
    }
}
