//! Paired significance tests and box statistics over score samples.
//!
//! The unit of comparison is one score per subject (per class), paired
//! across methods. Exact Wilcoxon p-values are computed by enumeration for
//! small samples and by a tie-corrected normal approximation otherwise.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::quantile::quantile_sorted;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// True when the p-value comes from exact enumeration.
    pub exact: bool,
}

/// Two-sided paired t-test on equal-length samples.
///
/// All-zero differences give p = 1.0; zero variance with a nonzero mean is
/// a numeric error (the statistic is unbounded).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::config("paired t-test needs at least 2 pairs"));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("paired t-test on non-finite differences"));
    }
    if d.iter().all(|&x| x == 0.0) {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            exact: false,
        });
    }
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::numeric(
            "paired t-test: zero variance with nonzero mean difference",
        ));
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::numeric(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TestResult {
        statistic: t,
        p_value: p.clamp(0.0, 1.0),
        exact: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMode {
    /// Unpaired two-sample rank-sum (Mann-Whitney).
    RankSum,
    /// Paired signed-rank; zero differences are dropped.
    SignedRank,
}

/// Midranks of the given values (average rank over ties), 1-based.
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share ranks i+1..=j+1
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Tie-correction term sum over tie groups of (t^3 - t).
fn tie_term(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut term = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        term += t * t * t - t;
        i = j + 1;
    }
    term
}

fn doubled(r: f64) -> u64 {
    // midranks are integers or half-integers; doubling is exact
    let d = 2.0 * r;
    let rounded = d.round();
    debug_assert!((d - rounded).abs() < 1e-9);
    rounded as u64
}

/// Exact two-sided rank-sum p by dynamic programming over the distribution
/// of size-n1 subset rank sums (doubled to integers to absorb midranks).
fn rank_sum_exact(ranks: &[f64], n1: usize, observed: f64) -> f64 {
    let items: Vec<u64> = ranks.iter().map(|&r| doubled(r)).collect();
    let max_sum: u64 = items.iter().sum();
    // count[k][s] = number of k-subsets of items with doubled-rank sum s
    let mut count = vec![vec![0u128; (max_sum + 1) as usize]; n1 + 1];
    count[0][0] = 1;
    for &v in &items {
        for k in (1..=n1).rev() {
            for s in (v..=max_sum).rev() {
                let add = count[k - 1][(s - v) as usize];
                if add > 0 {
                    count[k][s as usize] += add;
                }
            }
        }
    }
    let total: u128 = count[n1].iter().sum();
    let w = doubled(observed);
    let below: u128 = count[n1][..=(w as usize).min(max_sum as usize)].iter().sum();
    let above: u128 = count[n1][(w as usize).min(max_sum as usize)..].iter().sum();
    let p_low = below as f64 / total as f64;
    let p_high = above as f64 / total as f64;
    (2.0 * p_low.min(p_high)).min(1.0)
}

fn rank_sum_normal_approx(ranks: &[f64], values: &[f64], n1: usize, observed: f64) -> Result<f64> {
    let n = ranks.len() as f64;
    let n1f = n1 as f64;
    let n2f = n - n1f;
    let mean = n1f * (n + 1.0) / 2.0;
    let tie = tie_term(values);
    let var = n1f * n2f / 12.0 * ((n + 1.0) - tie / (n * (n - 1.0)));
    if var <= 0.0 {
        // every value tied with every other: no evidence either way
        return Ok(1.0);
    }
    let diff = observed - mean;
    let cc = 0.5 * diff.signum();
    let z = (diff - cc) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::numeric(format!("normal: {e}")))?;
    Ok((2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0))
}

/// Exact two-sided signed-rank p by enumeration of all sign assignments.
fn signed_rank_exact(ranks: &[f64], observed: f64) -> f64 {
    let items: Vec<u64> = ranks.iter().map(|&r| doubled(r)).collect();
    let n = items.len();
    let w = doubled(observed);
    let mut le = 0u64;
    let mut ge = 0u64;
    let total = 1u64 << n;
    for mask in 0..total {
        let mut s = 0u64;
        for (bit, &v) in items.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                s += v;
            }
        }
        le += (s <= w) as u64;
        ge += (s >= w) as u64;
    }
    let p_low = le as f64 / total as f64;
    let p_high = ge as f64 / total as f64;
    (2.0 * p_low.min(p_high)).min(1.0)
}

fn signed_rank_normal_approx(ranks: &[f64], abs_d: &[f64], observed: f64) -> Result<f64> {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie = tie_term(abs_d);
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let diff = observed - mean;
    let cc = 0.5 * diff.signum();
    let z = (diff - cc) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::numeric(format!("normal: {e}")))?;
    Ok((2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0))
}

/// Largest group size for which exact enumeration is used.
pub const EXACT_LIMIT: usize = 10;

/// Two-sided Wilcoxon test in the requested mode.
pub fn wilcoxon_test(a: &[f64], b: &[f64], mode: WilcoxonMode) -> Result<TestResult> {
    match mode {
        WilcoxonMode::RankSum => {
            if a.is_empty() || b.is_empty() {
                return Err(Error::config("rank-sum test needs non-empty samples"));
            }
            let mut combined: Vec<f64> = Vec::with_capacity(a.len() + b.len());
            combined.extend_from_slice(a);
            combined.extend_from_slice(b);
            if combined.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric("rank-sum test on non-finite values"));
            }
            let ranks = midranks(&combined);
            let w: f64 = ranks[..a.len()].iter().sum();
            if a.len() <= EXACT_LIMIT && b.len() <= EXACT_LIMIT {
                Ok(TestResult {
                    statistic: w,
                    p_value: rank_sum_exact(&ranks, a.len(), w),
                    exact: true,
                })
            } else {
                Ok(TestResult {
                    statistic: w,
                    p_value: rank_sum_normal_approx(&ranks, &combined, a.len(), w)?,
                    exact: false,
                })
            }
        }
        WilcoxonMode::SignedRank => {
            if a.len() != b.len() {
                return Err(Error::config(format!(
                    "signed-rank test needs equal lengths, got {} and {}",
                    a.len(),
                    b.len()
                )));
            }
            let d: Vec<f64> = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| x - y)
                .filter(|&x| x != 0.0)
                .collect();
            if d.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric("signed-rank test on non-finite differences"));
            }
            if d.is_empty() {
                return Ok(TestResult {
                    statistic: 0.0,
                    p_value: 1.0,
                    exact: true,
                });
            }
            let abs_d: Vec<f64> = d.iter().map(|x| x.abs()).collect();
            let ranks = midranks(&abs_d);
            let w_plus: f64 = d
                .iter()
                .zip(ranks.iter())
                .filter(|(x, _)| **x > 0.0)
                .map(|(_, r)| r)
                .sum();
            if d.len() <= EXACT_LIMIT {
                Ok(TestResult {
                    statistic: w_plus,
                    p_value: signed_rank_exact(&ranks, w_plus),
                    exact: true,
                })
            } else {
                Ok(TestResult {
                    statistic: w_plus,
                    p_value: signed_rank_normal_approx(&ranks, &abs_d, w_plus)?,
                    exact: false,
                })
            }
        }
    }
}

/// Five-number box summary plus mean and 1.5*IQR outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub iqr: f64,
    pub outliers: Vec<f64>,
}

pub fn box_stats(xs: &[f64]) -> Result<BoxStats> {
    if xs.is_empty() {
        return Err(Error::config("box statistics of an empty sample"));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("box statistics on non-finite values"));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p25 = quantile_sorted(&sorted, 0.25)?;
    let median = quantile_sorted(&sorted, 0.5)?;
    let p75 = quantile_sorted(&sorted, 0.75)?;
    let iqr = p75 - p25;
    let lo = p25 - 1.5 * iqr;
    let hi = p75 + 1.5 * iqr;
    let outliers: Vec<f64> = sorted
        .iter()
        .copied()
        .filter(|&x| x < lo || x > hi)
        .collect();
    Ok(BoxStats {
        min: sorted[0],
        max: *sorted.last().unwrap(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p25,
        median,
        p75,
        iqr,
        outliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Student t density for the quadrature oracle.
    fn t_pdf(x: f64, df: f64) -> f64 {
        // gamma((df+1)/2) / (sqrt(df*pi) gamma(df/2)) (1 + x^2/df)^-(df+1)/2
        let g = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(df / 2.0);
        let norm = g.exp() / (df * std::f64::consts::PI).sqrt();
        norm * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0)
    }

    /// Independent two-sided p for the t statistic via Simpson quadrature
    /// of the density over [0, |t|].
    fn t_p_value_quadrature(t: f64, df: f64) -> f64 {
        let a = 0.0;
        let b = t.abs();
        let n = 20_000; // even
        let h = (b - a) / n as f64;
        let mut s = t_pdf(a, df) + t_pdf(b, df);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += t_pdf(x, df) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let integral = s * h / 3.0;
        2.0 * (0.5 - integral)
    }

    #[test]
    fn paired_t_on_1_to_5_differences() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0, 0.0, 0.0, 0.0, 0.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.statistic - 3.0 / (2.5f64 / 5.0).sqrt()).abs() < 1e-12);
        assert!(
            (r.p_value - 0.0132).abs() <= 1e-3,
            "expected p near 0.0132, got {}",
            r.p_value
        );
        let oracle = t_p_value_quadrature(r.statistic, 4.0);
        assert!(
            (r.p_value - oracle).abs() <= 1e-8,
            "cdf {} vs quadrature {}",
            r.p_value,
            oracle
        );
    }

    #[test]
    fn paired_t_all_zero_differences_gives_p_1() {
        let a = [0.3, 0.4, 0.5];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn paired_t_zero_variance_nonzero_mean_errors() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.0, 1.0, 2.0];
        let err = paired_t_test(&a, &b).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn paired_t_symmetric_in_argument_order() {
        let a = [0.91, 0.85, 0.88, 0.93, 0.80, 0.87];
        let b = [0.89, 0.80, 0.90, 0.88, 0.79, 0.82];
        let r1 = paired_t_test(&a, &b).unwrap();
        let r2 = paired_t_test(&b, &a).unwrap();
        assert!((r1.p_value - r2.p_value).abs() < 1e-15);
        assert!((r1.statistic + r2.statistic).abs() < 1e-15);
    }

    #[test]
    fn rank_sum_123_vs_456_is_exactly_0_1() {
        let r = wilcoxon_test(
            &[1.0, 2.0, 3.0],
            &[4.0, 5.0, 6.0],
            WilcoxonMode::RankSum,
        )
        .unwrap();
        assert!(r.exact);
        assert_eq!(r.statistic, 6.0);
        assert!((r.p_value - 0.1).abs() < 1e-12, "got {}", r.p_value);
    }

    #[test]
    fn rank_sum_symmetric_in_argument_order() {
        let a = [1.0, 5.0, 2.0, 8.0];
        let b = [3.0, 3.0, 9.0];
        let r1 = wilcoxon_test(&a, &b, WilcoxonMode::RankSum).unwrap();
        let r2 = wilcoxon_test(&b, &a, WilcoxonMode::RankSum).unwrap();
        assert!((r1.p_value - r2.p_value).abs() < 1e-12);
    }

    /// Brute-force oracle: enumerate all n1-subsets of positions directly.
    fn rank_sum_brute(a: &[f64], b: &[f64]) -> f64 {
        let mut combined: Vec<f64> = a.to_vec();
        combined.extend_from_slice(b);
        let ranks = midranks(&combined);
        let w_obs: f64 = ranks[..a.len()].iter().sum();
        let n = combined.len();
        let mut le = 0u64;
        let mut ge = 0u64;
        let mut total = 0u64;
        // enumerate bitmasks with popcount == a.len()
        for mask in 0u64..(1 << n) {
            if (mask.count_ones() as usize) != a.len() {
                continue;
            }
            let mut s = 0.0;
            for (i, r) in ranks.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    s += r;
                }
            }
            total += 1;
            le += (s <= w_obs + 1e-9) as u64;
            ge += (s >= w_obs - 1e-9) as u64;
        }
        let p = 2.0 * (le.min(ge) as f64) / total as f64;
        p.min(1.0)
    }

    #[test]
    fn rank_sum_exact_matches_brute_force_up_to_n8() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n1 in 1..=8usize {
            for n2 in 1..=8usize {
                // half the draws from a small integer lattice to force ties
                let a: Vec<f64> = (0..n1).map(|_| rng.gen_range(0..6) as f64).collect();
                let b: Vec<f64> = (0..n2).map(|_| rng.gen_range(0..6) as f64).collect();
                let fast = wilcoxon_test(&a, &b, WilcoxonMode::RankSum).unwrap();
                assert!(fast.exact);
                let brute = rank_sum_brute(&a, &b);
                assert!(
                    (fast.p_value - brute).abs() < 1e-9,
                    "n1={n1} n2={n2} a={a:?} b={b:?}: {} vs {}",
                    fast.p_value,
                    brute
                );
            }
        }
    }

    #[test]
    fn rank_sum_exact_close_to_normal_approx_at_n10() {
        let a: Vec<f64> = (0..10).map(|i| i as f64 + 0.3).collect();
        let b: Vec<f64> = (0..10).map(|i| i as f64 * 1.1).collect();
        let mut combined = a.clone();
        combined.extend_from_slice(&b);
        let ranks = midranks(&combined);
        let w: f64 = ranks[..a.len()].iter().sum();
        let exact = rank_sum_exact(&ranks, a.len(), w);
        let approx = rank_sum_normal_approx(&ranks, &combined, a.len(), w).unwrap();
        assert!(
            (exact - approx).abs() <= 0.02,
            "exact {exact} vs approx {approx}"
        );
    }

    #[test]
    fn signed_rank_all_zero_differences_gives_p_1() {
        let a = [0.5, 0.6, 0.7];
        let r = wilcoxon_test(&a, &a, WilcoxonMode::SignedRank).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn signed_rank_exact_small_case() {
        // d = (1, 2, 3, 4, 5): W+ = 15, the maximum; 2/2^5 patterns at >= 15
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = wilcoxon_test(&a, &b, WilcoxonMode::SignedRank).unwrap();
        assert!(r.exact);
        assert_eq!(r.statistic, 15.0);
        assert!((r.p_value - 2.0 / 32.0).abs() < 1e-12, "got {}", r.p_value);
    }

    #[test]
    fn large_samples_use_normal_approximation() {
        let a: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..25).map(|i| (i as f64 * 0.53).cos() * 0.8).collect();
        let r = wilcoxon_test(&a, &b, WilcoxonMode::RankSum).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        let s = wilcoxon_test(&a, &b, WilcoxonMode::SignedRank).unwrap();
        assert!(!s.exact);
        assert!(s.p_value > 0.0 && s.p_value <= 1.0);
    }

    #[test]
    fn box_stats_of_1_to_5() {
        let r = box_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(r.min, 1.0);
        assert_eq!(r.max, 5.0);
        assert_eq!(r.mean, 3.0);
        assert_eq!(r.p25, 2.0);
        assert_eq!(r.median, 3.0);
        assert_eq!(r.p75, 4.0);
        assert_eq!(r.iqr, 2.0);
        assert!(r.outliers.is_empty());
    }

    #[test]
    fn box_stats_flags_outliers() {
        let r = box_stats(&[1.0, 2.0, 3.0, 4.0, 5.0, 100.0]).unwrap();
        assert_eq!(r.outliers, vec![100.0]);
    }
}
