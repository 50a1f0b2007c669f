//! Significance tests and distribution summaries on paired score samples:
//! the paired t-test, both Wilcoxon modes (exact for small n), and
//! box-and-whisker statistics.
//!
//! ```text
//! cargo run --example significance
//! ```

use mpseg::evalstats::{box_stats, paired_t_test, wilcoxon_test, WilcoxonMode};

fn main() -> mpseg::Result<()> {
    // two methods scored on the same eight subjects
    let a = [0.91, 0.88, 0.93, 0.90, 0.86, 0.92, 0.89, 0.94];
    let b = [0.89, 0.87, 0.90, 0.90, 0.84, 0.90, 0.88, 0.91];

    let t = paired_t_test(&a, &b)?;
    println!("paired t:    t = {:+.4}, p = {:.4}", t.statistic, t.p_value);
    let rs = wilcoxon_test(&a, &b, WilcoxonMode::RankSum)?;
    println!(
        "rank-sum:    W = {:.1}, p = {:.4} (exact: {})",
        rs.statistic, rs.p_value, rs.exact
    );
    let sr = wilcoxon_test(&a, &b, WilcoxonMode::SignedRank)?;
    println!(
        "signed-rank: W+ = {:.1}, p = {:.4} (exact: {})",
        sr.statistic, sr.p_value, sr.exact
    );

    // a hand-checkable case: differences 1..5 give p close to 0.0132
    let base = [0.0, 0.0, 0.0, 0.0, 0.0];
    let shifted = [1.0, 2.0, 3.0, 4.0, 5.0];
    let t = paired_t_test(&shifted, &base)?;
    println!("\ndifferences 1..5: t = {:.4}, p = {:.6}", t.statistic, t.p_value);

    let stats = box_stats(&a)?;
    println!(
        "\nbox stats of method A: min {:.2}, p25 {:.3}, median {:.3}, p75 {:.3}, max {:.2}, mean {:.4}, iqr {:.3}, outliers {:?}",
        stats.min, stats.p25, stats.median, stats.p75, stats.max, stats.mean, stats.iqr, stats.outliers
    );
    Ok(())
}
