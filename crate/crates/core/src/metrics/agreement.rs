use std::collections::BTreeMap;

use super::MetricsError;

/// Fleiss's kappa for an items x raters matrix of categorical ratings.
pub fn fleiss_kappa<T: Ord>(ratings: &[Vec<T>]) -> Result<f64, MetricsError> {
    let raters = ratings.first().map_or(0, Vec::len);
    if ratings.is_empty() || raters < 2 {
        return Err(MetricsError::Invalid(format!(
            "need at least one item and two raters, got {} items and {raters} raters",
            ratings.len()
        )));
    }
    let mut index: BTreeMap<&T, usize> = BTreeMap::new();
    for row in ratings {
        for r in row {
            let next = index.len();
            index.entry(r).or_insert(next);
        }
    }
    let mut counts = Vec::with_capacity(ratings.len());
    for (i, row) in ratings.iter().enumerate() {
        if row.len() != raters {
            return Err(MetricsError::Invalid(format!(
                "item {i} has {} ratings, expected {raters}",
                row.len()
            )));
        }
        let mut c = vec![0u64; index.len()];
        for r in row {
            c[index[r]] += 1;
        }
        counts.push(c);
    }
    fleiss_kappa_counts(&counts)
}

/// Fleiss's kappa from per-item category counts `n_ij`; every row must sum
/// to the same rater count `n >= 2`.
///
/// `kappa = (P_bar - P_e) / (1 - P_e)` with
/// `P_i = (sum_j n_ij^2 - n) / (n (n - 1))` and `P_e = sum_j p_j^2`.
pub fn fleiss_kappa_counts(counts: &[Vec<u64>]) -> Result<f64, MetricsError> {
    let n = counts.first().map_or(0, |r| r.iter().sum::<u64>());
    if counts.is_empty() || n < 2 {
        return Err(MetricsError::Invalid("need at least one item and two raters".into()));
    }
    let k = counts[0].len();
    let mut column = vec![0u64; k];
    let mut agreement_sum = 0.0;
    for (i, row) in counts.iter().enumerate() {
        if row.len() != k || row.iter().sum::<u64>() != n {
            return Err(MetricsError::Invalid(format!(
                "item {i} does not have {n} ratings over {k} categories"
            )));
        }
        let sq: u64 = row.iter().map(|&x| x * x).sum();
        agreement_sum += (sq - n) as f64 / (n * (n - 1)) as f64;
        for (c, &x) in column.iter_mut().zip(row) {
            *c += x;
        }
    }
    let total = (counts.len() as u64 * n) as f64;
    let p_bar = agreement_sum / counts.len() as f64;
    let p_e: f64 = column.iter().map(|&c| (c as f64 / total).powi(2)).sum();
    if p_e >= 1.0 {
        return if p_bar == 1.0 {
            Ok(1.0)
        } else {
            Err(MetricsError::UndefinedKappa(
                "chance agreement is 1 but observed agreement is not".into(),
            ))
        };
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn complete_agreement_is_one() {
        let m: Vec<Vec<&str>> = (0..20)
            .map(|i| vec![if i % 3 == 0 { "tear" } else { "no_tear" }; 4])
            .collect();
        assert_eq!(fleiss_kappa(&m).unwrap(), 1.0);
        // A single category everywhere: chance agreement is 1 as well.
        assert_eq!(fleiss_kappa(&vec![vec!['a'; 3]; 5]).unwrap(), 1.0);
    }

    #[test]
    fn hand_evaluated_matrices() {
        // P_bar = 0, P_e = 1/2.
        assert!((fleiss_kappa(&[vec!['A', 'B'], vec!['B', 'A']]).unwrap() + 1.0).abs() < 1e-12);
        // P_bar = 5/12, P_e = 7/18, kappa = 1/22.
        let m = [
            vec!['A', 'A', 'A'],
            vec!['A', 'A', 'B'],
            vec!['B', 'B', 'C'],
            vec!['A', 'B', 'C'],
        ];
        assert!((fleiss_kappa(&m).unwrap() - 1.0 / 22.0).abs() < 1e-12);
        // Ten items rated by fourteen raters into five categories; exact
        // rational value 4211 / 20059.
        let counts = vec![
            vec![0, 0, 0, 0, 14],
            vec![0, 2, 6, 4, 2],
            vec![0, 0, 3, 5, 6],
            vec![0, 3, 9, 2, 0],
            vec![2, 2, 8, 1, 1],
            vec![7, 7, 0, 0, 0],
            vec![3, 2, 6, 3, 0],
            vec![2, 5, 3, 2, 2],
            vec![6, 5, 2, 1, 0],
            vec![0, 2, 2, 3, 7],
        ];
        assert!((fleiss_kappa_counts(&counts).unwrap() - 4211.0 / 20059.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_matrices_are_rejected() {
        assert!(fleiss_kappa::<u8>(&[]).is_err());
        assert!(fleiss_kappa(&[vec![1]]).is_err());
        assert!(fleiss_kappa(&[vec![1, 2], vec![1]]).is_err());
    }

    proptest! {
        #[test]
        fn unanimous_items_give_one_for_any_category_count(
            cats in prop::collection::vec(0u8..7, 1..30),
            raters in 2usize..9,
        ) {
            let m: Vec<Vec<u8>> = cats.iter().map(|&c| vec![c; raters]).collect();
            prop_assert_eq!(fleiss_kappa(&m).unwrap(), 1.0);
        }

        #[test]
        fn kappa_is_deterministic_and_at_most_one(m in prop::collection::vec(prop::collection::vec(0u8..3, 3), 1..20)) {
            if let Ok(k) = fleiss_kappa(&m) {
                prop_assert_eq!(k, fleiss_kappa(&m.clone()).unwrap());
                prop_assert!(k <= 1.0 + 1e-12);
            }
        }
    }
}
