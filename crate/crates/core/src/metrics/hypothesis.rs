//! Cohort comparison tests: Pearson chi-squared on a 2x2 table without
//! continuity correction, and the pooled-variance two-sample t-test.

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use super::MetricsError;

/// `(statistic, p)` for a 2x2 contingency table, df = 1.
pub fn chi_squared_test(table: [[u64; 2]; 2]) -> Result<(f64, f64), MetricsError> {
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let n = (rows[0] + rows[1]) as f64;
    if rows.contains(&0) || cols.contains(&0) {
        return Err(MetricsError::TestAssumption(format!(
            "table {table:?} has an expected count of zero"
        )));
    }
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let expected = rows[i] as f64 * cols[j] as f64 / n;
            stat += (table[i][j] as f64 - expected).powi(2) / expected;
        }
    }
    let dist = ChiSquared::new(1.0).expect("df = 1 is valid");
    Ok((stat, dist.sf(stat)))
}

/// Mean from sorted values, so that permuted samples agree bitwise.
fn sorted_mean(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unpaired two-tailed Student t-test with pooled variance,
/// df = n_a + n_b - 2. Returns `(t, p)`.
pub fn welchless_t_test(group_a: &[f64], group_b: &[f64]) -> Result<(f64, f64), MetricsError> {
    let (na, nb) = (group_a.len(), group_b.len());
    if na < 2 || nb < 2 {
        return Err(MetricsError::TestAssumption(format!(
            "each group needs n >= 2, got {na} and {nb}"
        )));
    }
    if group_a.iter().chain(group_b).any(|x| !x.is_finite()) {
        return Err(MetricsError::TestAssumption("non-finite observation".into()));
    }
    let (ma, mb) = (sorted_mean(group_a), sorted_mean(group_b));
    let ss = |xs: &[f64], m: f64| {
        let mut d: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
        d.sort_by(f64::total_cmp);
        d.iter().sum::<f64>()
    };
    let df = (na + nb - 2) as f64;
    let pooled = (ss(group_a, ma) + ss(group_b, mb)) / df;
    if pooled.is_nan() || pooled <= 0.0 {
        return Err(MetricsError::TestAssumption("pooled variance is zero".into()));
    }
    let t = (ma - mb) / (pooled * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 2 is valid");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok((t, p))
}
