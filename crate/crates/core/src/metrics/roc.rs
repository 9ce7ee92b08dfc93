use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::util::rng_from;

/// Resolution of the false-positive-rate grid the bootstrap band is sampled on.
pub const FPR_GRID_POINTS: usize = 101;

fn class_counts(scores: &[(f64, bool)]) -> Result<(usize, usize), MetricsError> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(MetricsError::Invalid(format!("non-finite score {s}")));
    }
    let positives = scores.iter().filter(|(_, y)| *y).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Groups of equal scores in ascending order as `(score, positives, negatives)`.
fn tied_groups(scores: &[(f64, bool)]) -> Vec<(f64, u64, u64)> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for (s, y) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if y {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, y as u64, !y as u64)),
        }
    }
    groups
}

/// Mann-Whitney AUC: `(concordant + ties / 2) / (P * N)` over all
/// positive-negative pairs, from exact integer pair counts.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<f64, MetricsError> {
    let (p, n) = class_counts(scores)?;
    Ok(auc_unchecked(scores, p, n))
}

fn auc_unchecked(scores: &[(f64, bool)], p: usize, n: usize) -> f64 {
    let mut twice_wins: u128 = 0;
    let mut negatives_below: u128 = 0;
    for (_, pos, neg) in tied_groups(scores) {
        twice_wins += 2 * pos as u128 * negatives_below + pos as u128 * neg as u128;
        negatives_below += neg as u128;
    }
    twice_wins as f64 / (2 * p as u128 * n as u128) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Operating points for every unique score used as a `>=` threshold,
/// preceded by the empty-positive point at `+inf`. Ascending in fpr.
pub fn roc_curve(scores: &[(f64, bool)]) -> Result<Vec<RocPoint>, MetricsError> {
    let (p, n) = class_counts(scores)?;
    Ok(curve_unchecked(scores, p, n))
}

fn curve_unchecked(scores: &[(f64, bool)], p: usize, n: usize) -> Vec<RocPoint> {
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (s, pos, neg) in tied_groups(scores).into_iter().rev() {
        tp += pos;
        fp += neg;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    points
}

/// True-positive rate at `fpr` by linear interpolation between operating
/// points; on a vertical run the highest tpr is taken.
pub fn tpr_at(curve: &[RocPoint], fpr: f64) -> f64 {
    let mut best = 0.0f64;
    for w in curve.windows(2) {
        let (a, b) = (w[0], w[1]);
        if fpr < a.fpr || fpr > b.fpr {
            continue;
        }
        let t = if b.fpr > a.fpr {
            a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr)
        } else {
            b.tpr
        };
        best = best.max(t);
    }
    best
}

/// Linear-interpolation percentile (`q` in [0, 1]) of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRoc {
    pub auc_ci_95: (f64, f64),
    /// Resamples that contained both classes.
    pub valid_iterations: usize,
    /// `(fpr, tpr 2.5th percentile, tpr 97.5th percentile)`; empty when no
    /// band was requested.
    pub band: Vec<(f64, f64, f64)>,
}

/// Case-level bootstrap of the AUC and, when `band_points > 1`, of the ROC
/// curve on an evenly spaced fpr grid.
///
/// Iteration `i` draws from its own stream derived from `(seed, i)`, so
/// results do not depend on evaluation order. Single-class resamples are
/// skipped, not redrawn.
pub fn bootstrap_roc(
    scores: &[(f64, bool)],
    iterations: usize,
    seed: u64,
    band_points: usize,
) -> Result<BootstrapRoc, MetricsError> {
    class_counts(scores)?;
    if iterations < 2 {
        return Err(MetricsError::Bootstrap(format!(
            "need at least 2 iterations, got {iterations}"
        )));
    }
    let grid: Vec<f64> = if band_points > 1 {
        (0..band_points).map(|k| k as f64 / (band_points - 1) as f64).collect()
    } else {
        Vec::new()
    };
    let mut aucs = Vec::with_capacity(iterations);
    let mut tprs: Vec<Vec<f64>> = vec![Vec::with_capacity(iterations); grid.len()];
    let mut sample = Vec::with_capacity(scores.len());
    for i in 0..iterations {
        let mut rng = rng_from(seed, &[b"bootstrap", &(i as u64).to_le_bytes()]);
        sample.clear();
        sample.extend((0..scores.len()).map(|_| scores[rng.random_range(0..scores.len())]));
        let p = sample.iter().filter(|(_, y)| *y).count();
        let n = sample.len() - p;
        if p == 0 || n == 0 {
            continue;
        }
        aucs.push(auc_unchecked(&sample, p, n));
        if !grid.is_empty() {
            let curve = curve_unchecked(&sample, p, n);
            for (k, &f) in grid.iter().enumerate() {
                tprs[k].push(tpr_at(&curve, f));
            }
        }
    }
    if aucs.is_empty() {
        return Err(MetricsError::Bootstrap(format!(
            "all {iterations} resamples were single-class"
        )));
    }
    aucs.sort_by(f64::total_cmp);
    let band = grid
        .iter()
        .zip(&mut tprs)
        .map(|(&f, t)| {
            t.sort_by(f64::total_cmp);
            (f, percentile(t, 0.025), percentile(t, 0.975))
        })
        .collect();
    Ok(BootstrapRoc {
        auc_ci_95: (percentile(&aucs, 0.025), percentile(&aucs, 0.975)),
        valid_iterations: aucs.len(),
        band,
    })
}

/// Percentile 95% interval of the bootstrap AUC.
pub fn bootstrap_auc_ci(scores: &[(f64, bool)], iterations: usize, seed: u64) -> Result<(f64, f64), MetricsError> {
    Ok(bootstrap_roc(scores, iterations, seed, 0)?.auc_ci_95)
}
