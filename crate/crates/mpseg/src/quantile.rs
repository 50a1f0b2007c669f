//! Quantiles with linear interpolation between order statistics.
//!
//! Single shared implementation so intensity scaling and box statistics
//! agree bit-for-bit: for fraction q over n sorted values, the quantile is
//! taken at rank h = (n-1)*q, interpolating linearly between the two
//! neighbouring order statistics.

use crate::error::{Error, Result};

/// Quantile of already-sorted data, `q` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::numeric("quantile of empty data"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config(format!("quantile fraction {q} outside [0, 1]")));
    }
    let n = sorted.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        return Ok(sorted[lo]);
    }
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Quantile of unsorted data; copies and sorts.
pub fn quantile(data: &[f64], q: f64) -> Result<f64> {
    let mut v = data.to_vec();
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::numeric("quantile of data containing NaN"));
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&v, q)
}

/// Median via the same interpolation rule.
pub fn median_sorted(sorted: &[f64]) -> Result<f64> {
    quantile_sorted(sorted, 0.5)
}

/// Interquartile range p75 - p25 of sorted data.
pub fn iqr_sorted(sorted: &[f64]) -> Result<f64> {
    Ok(quantile_sorted(sorted, 0.75)? - quantile_sorted(sorted, 0.25)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_1_to_100_is_50_5() {
        let v: Vec<f64> = (1..=100).map(|x| x as f64).collect();
        assert_eq!(quantile_sorted(&v, 0.5).unwrap(), 50.5);
    }

    #[test]
    fn iqr_of_1_to_100_is_49_5() {
        let v: Vec<f64> = (1..=100).map(|x| x as f64).collect();
        assert_eq!(iqr_sorted(&v).unwrap(), 49.5);
    }

    #[test]
    fn quartiles_of_1_to_5() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.25).unwrap(), 2.0);
        assert_eq!(quantile_sorted(&v, 0.5).unwrap(), 3.0);
        assert_eq!(quantile_sorted(&v, 0.75).unwrap(), 4.0);
    }

    #[test]
    fn endpoints_and_singletons() {
        let v = [3.0];
        assert_eq!(quantile_sorted(&v, 0.0).unwrap(), 3.0);
        assert_eq!(quantile_sorted(&v, 1.0).unwrap(), 3.0);
        let w = [1.0, 2.0];
        assert_eq!(quantile_sorted(&w, 0.0).unwrap(), 1.0);
        assert_eq!(quantile_sorted(&w, 1.0).unwrap(), 2.0);
        assert_eq!(quantile_sorted(&w, 0.5).unwrap(), 1.5);
    }

    #[test]
    fn rejects_empty_and_bad_fraction() {
        assert!(quantile_sorted(&[], 0.5).is_err());
        assert!(quantile_sorted(&[1.0], 1.5).is_err());
        assert!(quantile(&[f64::NAN], 0.5).is_err());
    }
}
