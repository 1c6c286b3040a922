//! Chi-square test harness for the simulation diagnostics: goodness of
//! fit against fixed probabilities, two-sample homogeneity, and
//! contingency-table independence, all with deterministic bin pooling so
//! reports are reproducible from the recorded bin plans.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Bins whose pooled expected count falls below this threshold are merged
/// before the statistic is formed (the usual validity rule of thumb).
pub const MIN_EXPECTED: f64 = 5.0;

/// Outcome of one chi-square test. `degrees` counts the statistic's
/// degrees of freedom after pooling; `pooled_bins` is the number of cells
/// that actually entered the statistic.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ChiSquareReport {
    pub statistic: f64,
    pub degrees: u64,
    pub p_value: f64,
    pub pooled_bins: usize,
}

impl ChiSquareReport {
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value > alpha
    }

    fn degenerate() -> Self {
        ChiSquareReport {
            statistic: 0.0,
            degrees: 0,
            p_value: 1.0,
            pooled_bins: 1,
        }
    }
}

fn chi_square_p_value(statistic: f64, degrees: u64) -> f64 {
    if degrees == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(degrees as f64).expect("positive degrees of freedom");
    (1.0 - dist.cdf(statistic)).clamp(0.0, 1.0)
}

/// Goodness of fit of observed counts against fixed cell probabilities.
/// Cells are pooled greedily from the right until every expected count
/// reaches MIN_EXPECTED; the comparison is then sum (o - e)^2 / e with
/// bins - 1 degrees of freedom.
pub fn chi_square_gof(observed: &[u64], probabilities: &[f64]) -> Result<ChiSquareReport> {
    if observed.len() != probabilities.len() || observed.is_empty() {
        return Err(Error::DiagnosticPrecondition(
            "observed counts and cell probabilities must align and be nonempty".into(),
        ));
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return Err(Error::DiagnosticPrecondition(
            "goodness of fit needs at least one observation".into(),
        ));
    }
    let psum: f64 = probabilities.iter().sum();
    if probabilities.iter().any(|&p| p < 0.0) || psum <= 0.0 {
        return Err(Error::DiagnosticPrecondition(
            "cell probabilities must be nonnegative with positive total".into(),
        ));
    }
    let expected: Vec<f64> = probabilities
        .iter()
        .map(|&p| p / psum * total as f64)
        .collect();

    // Pool adjacent cells (from the right) until every expected count is
    // large enough; this keeps the bin plan a deterministic function of
    // the inputs.
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    for (&o, &e) in observed.iter().zip(&expected) {
        pooled.push((o as f64, e));
        while pooled.len() >= 2 && pooled.last().unwrap().1 < MIN_EXPECTED {
            let (o2, e2) = pooled.pop().unwrap();
            let last = pooled.last_mut().unwrap();
            last.0 += o2;
            last.1 += e2;
        }
    }
    // The leading cell may still be small: merge forward.
    while pooled.len() >= 2 && pooled[0].1 < MIN_EXPECTED {
        let (o0, e0) = pooled.remove(0);
        pooled[0].0 += o0;
        pooled[0].1 += e0;
    }
    if pooled.len() < 2 {
        return Ok(ChiSquareReport::degenerate());
    }
    let statistic: f64 = pooled
        .iter()
        .map(|&(o, e)| (o - e) * (o - e) / e)
        .sum();
    let degrees = (pooled.len() - 1) as u64;
    Ok(ChiSquareReport {
        statistic,
        degrees,
        p_value: chi_square_p_value(statistic, degrees),
        pooled_bins: pooled.len(),
    })
}

/// Two-sample homogeneity: are two vectors of bin counts draws from the
/// same distribution? Uses the standard statistic
/// sum (a_i sqrt(NB/NA) - b_i sqrt(NA/NB))^2 / (a_i + b_i) with
/// bins - 1 degrees of freedom, pooling bins whose combined count is
/// below MIN_EXPECTED.
pub fn chi_square_two_sample(counts_a: &[u64], counts_b: &[u64]) -> Result<ChiSquareReport> {
    if counts_a.len() != counts_b.len() || counts_a.is_empty() {
        return Err(Error::DiagnosticPrecondition(
            "two-sample test needs aligned nonempty count vectors".into(),
        ));
    }
    let na: u64 = counts_a.iter().sum();
    let nb: u64 = counts_b.iter().sum();
    if na == 0 || nb == 0 {
        return Err(Error::DiagnosticPrecondition(
            "two-sample test needs observations on both sides".into(),
        ));
    }
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    for (&a, &b) in counts_a.iter().zip(counts_b) {
        pooled.push((a as f64, b as f64));
        while pooled.len() >= 2 {
            let last = *pooled.last().unwrap();
            if last.0 + last.1 >= MIN_EXPECTED {
                break;
            }
            let (a2, b2) = pooled.pop().unwrap();
            let prev = pooled.last_mut().unwrap();
            prev.0 += a2;
            prev.1 += b2;
        }
    }
    while pooled.len() >= 2 && pooled[0].0 + pooled[0].1 < MIN_EXPECTED {
        let (a0, b0) = pooled.remove(0);
        pooled[0].0 += a0;
        pooled[0].1 += b0;
    }
    if pooled.len() < 2 {
        return Ok(ChiSquareReport::degenerate());
    }
    let ka = (nb as f64 / na as f64).sqrt();
    let kb = (na as f64 / nb as f64).sqrt();
    let statistic: f64 = pooled
        .iter()
        .filter(|&&(a, b)| a + b > 0.0)
        .map(|&(a, b)| {
            let d = ka * a - kb * b;
            d * d / (a + b)
        })
        .sum();
    let degrees = (pooled.len() - 1) as u64;
    Ok(ChiSquareReport {
        statistic,
        degrees,
        p_value: chi_square_p_value(statistic, degrees),
        pooled_bins: pooled.len(),
    })
}

/// Independence test on an r x c contingency table. Rows and columns whose
/// totals would force expected counts below MIN_EXPECTED are pooled into
/// their neighbors (smallest first), deterministically. Returns a
/// degenerate always-pass report when pooling collapses the table below
/// 2 x 2 — callers that need power should widen their bins instead.
pub fn chi_square_contingency(table: &[Vec<u64>]) -> Result<ChiSquareReport> {
    let rows = table.len();
    if rows == 0 || table[0].is_empty() {
        return Err(Error::DiagnosticPrecondition(
            "contingency table must be nonempty".into(),
        ));
    }
    let cols = table[0].len();
    if table.iter().any(|r| r.len() != cols) {
        return Err(Error::DiagnosticPrecondition(
            "contingency table rows must have equal length".into(),
        ));
    }
    let mut work: Vec<Vec<f64>> = table
        .iter()
        .map(|r| r.iter().map(|&c| c as f64).collect())
        .collect();

    loop {
        // Drop empty rows/cols, then merge the smallest margin into its
        // smallest sibling while the minimum expected count is too low.
        work.retain(|r| r.iter().sum::<f64>() > 0.0);
        if work.is_empty() {
            return Err(Error::DiagnosticPrecondition(
                "contingency table has no mass".into(),
            ));
        }
        let ncols = work[0].len();
        let col_totals: Vec<f64> = (0..ncols)
            .map(|j| work.iter().map(|r| r[j]).sum())
            .collect();
        if let Some(j) = col_totals.iter().position(|&t| t == 0.0) {
            for r in work.iter_mut() {
                r.remove(j);
            }
            continue;
        }
        let row_totals: Vec<f64> = work.iter().map(|r| r.iter().sum()).collect();
        let grand: f64 = row_totals.iter().sum();
        let min_expected = row_totals
            .iter()
            .flat_map(|&rt| col_totals.iter().map(move |&ct| rt * ct / grand))
            .fold(f64::INFINITY, f64::min);
        if min_expected >= MIN_EXPECTED || (work.len() <= 2 && ncols <= 2) {
            break;
        }
        // Merge along the dimension with the smaller offending margin.
        let (ri, &rmin) = row_totals
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let (ci, &cmin) = col_totals
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if (rmin <= cmin && work.len() > 2) || ncols <= 2 {
            let target = if ri == 0 { 1 } else { ri - 1 };
            let row = work.remove(ri);
            for (j, v) in row.into_iter().enumerate() {
                work[target][j] += v;
            }
        } else {
            let target = if ci == 0 { 1 } else { ci - 1 };
            for r in work.iter_mut() {
                let v = r.remove(ci);
                r[target] += v;
            }
        }
    }

    let nrows = work.len();
    let ncols = work[0].len();
    if nrows < 2 || ncols < 2 {
        return Ok(ChiSquareReport::degenerate());
    }
    let row_totals: Vec<f64> = work.iter().map(|r| r.iter().sum()).collect();
    let col_totals: Vec<f64> = (0..ncols).map(|j| work.iter().map(|r| r[j]).sum()).collect();
    let grand: f64 = row_totals.iter().sum();
    let mut statistic = 0.0;
    for (i, row) in work.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            let e = row_totals[i] * col_totals[j] / grand;
            statistic += (o - e) * (o - e) / e;
        }
    }
    let degrees = ((nrows - 1) * (ncols - 1)) as u64;
    Ok(ChiSquareReport {
        statistic,
        degrees,
        p_value: chi_square_p_value(statistic, degrees),
        pooled_bins: nrows * ncols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gof_exact_fit_and_frozen_value() {
        let perfect = chi_square_gof(&[10, 20, 30], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(perfect.statistic, 0.0);
        assert_eq!(perfect.p_value, 1.0);
        assert_eq!(perfect.degrees, 2);

        // Observed [16, 34] against a fair split of 50: statistic
        // (9^2 + 9^2)/25 = 6.48 on one degree of freedom, p = 0.010909...
        let skew = chi_square_gof(&[16, 34], &[0.5, 0.5]).unwrap();
        assert!((skew.statistic - 6.48).abs() < 1e-12);
        assert_eq!(skew.degrees, 1);
        assert!((skew.p_value - 0.0109095).abs() < 1e-6);
    }

    #[test]
    fn gof_pools_sparse_cells() {
        // 12 observations over 6 cells: expected 2 each, far below the
        // threshold, so everything pools down and the report degenerates
        // rather than fabricating power.
        let r = chi_square_gof(&[2, 2, 2, 2, 2, 2], &[1.0; 6]).unwrap();
        assert!(r.pooled_bins < 6);

        // With enough data no pooling happens.
        let r2 = chi_square_gof(&[100, 100, 100], &[1.0; 3]).unwrap();
        assert_eq!(r2.pooled_bins, 3);
    }

    #[test]
    fn gof_detects_bias_and_accepts_uniform_rng() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xD1CE);
        let mut counts = [0u64; 6];
        for _ in 0..60_000 {
            counts[rng.gen_range(0..6usize)] += 1;
        }
        let fair = chi_square_gof(&counts, &[1.0; 6]).unwrap();
        assert!(fair.p_value > 0.001, "uniform sampler flagged: {fair:?}");

        let mut biased = counts;
        biased[0] += 2_000;
        let bad = chi_square_gof(&biased, &[1.0; 6]).unwrap();
        assert!(bad.p_value < 1e-6, "bias missed: {bad:?}");
    }

    #[test]
    fn two_sample_agreement_and_separation() {
        let same = chi_square_two_sample(&[50, 60, 70], &[48, 66, 71]).unwrap();
        assert!(same.p_value > 0.01);

        let differ = chi_square_two_sample(&[500, 100, 100], &[100, 100, 500]).unwrap();
        assert!(differ.p_value < 1e-10);

        // Identical counts give a literal zero statistic.
        let exact = chi_square_two_sample(&[10, 20, 30], &[10, 20, 30]).unwrap();
        assert_eq!(exact.statistic, 0.0);
        assert_eq!(exact.p_value, 1.0);

        // Unequal sample sizes with proportional counts also pass exactly.
        let scaled = chi_square_two_sample(&[10, 20, 30], &[20, 40, 60]).unwrap();
        assert!(scaled.statistic.abs() < 1e-12);
    }

    #[test]
    fn two_sample_pools_sparse_bins() {
        let r = chi_square_two_sample(&[100, 1, 0, 1, 100], &[100, 0, 1, 1, 100]).unwrap();
        assert!(r.pooled_bins < 5);
        assert!(r.p_value > 0.001);
    }

    #[test]
    fn contingency_independence_and_dependence() {
        // Exactly proportional table: statistic 0.
        let indep = chi_square_contingency(&[vec![10, 20], vec![30, 60]]).unwrap();
        assert!(indep.statistic.abs() < 1e-12);
        assert_eq!(indep.degrees, 1);

        // Strong diagonal dependence is flagged.
        let dep = chi_square_contingency(&[vec![90, 10], vec![10, 90]]).unwrap();
        assert!(dep.p_value < 1e-12);

        // Frozen value: the classic 2x2 [[20,30],[30,20]] has
        // chi^2 = 100/25 + ... = 4.0 on 1 dof, p = 0.04550026.
        let frozen = chi_square_contingency(&[vec![20, 30], vec![30, 20]]).unwrap();
        assert!((frozen.statistic - 4.0).abs() < 1e-12);
        assert!((frozen.p_value - 0.045500).abs() < 1e-5);
    }

    #[test]
    fn contingency_pools_or_degenerates_gracefully() {
        // A table with a starving column pools it away.
        let r = chi_square_contingency(&[vec![50, 50, 1], vec![50, 50, 2]]).unwrap();
        assert!(r.p_value > 0.001);

        // All mass in one cell: nothing to test.
        let d = chi_square_contingency(&[vec![100, 0], vec![0, 0]]).unwrap();
        assert_eq!(d.degrees, 0);
        assert_eq!(d.p_value, 1.0);

        // Degenerate single row errors are caught upstream as empty mass.
        assert!(chi_square_contingency(&[]).is_err());
    }
}
