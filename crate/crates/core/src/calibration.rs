//! Multi-view probability averaging and the sensitivity = specificity
//! operating point chosen on validation data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Label, Modality, View};
use crate::model::ScanPrediction;
use crate::util::to_canonical_json;

pub const CALIBRATION_METHOD: &str = "sens-eq-spec-on-validation";

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no predictions to ensemble")]
    Empty,
    #[error("predictions mix studies `{first}` and `{other}`")]
    MixedStudies { first: String, other: String },
    #[error("calibration needs both classes, found {positives} positive and {negatives} negative")]
    SingleClass { positives: usize, negatives: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub study_id: String,
    /// Mean over the series of each view.
    pub per_view_probability: BTreeMap<View, f64>,
    pub ensemble_probability: f64,
    pub views_present: BTreeSet<View>,
}

fn check_probability(p: f64, what: &str) -> Result<(), CalibrationError> {
    if p.is_finite() && (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(CalibrationError::Domain(format!(
            "{what} probability {p} is outside [0, 1]"
        )))
    }
}

/// Order-independent mean: values are summed in sorted order and the
/// result is clamped into `[min, max]` against rounding.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    mean.clamp(values[0], values[values.len() - 1])
}

/// Nested mean: series within a view first, then the unweighted mean over
/// the views present.
pub fn ensemble_views(predictions: &[ScanPrediction]) -> Result<EnsemblePrediction, CalibrationError> {
    let first = predictions.first().ok_or(CalibrationError::Empty)?;
    let mut by_view: BTreeMap<View, Vec<f64>> = BTreeMap::new();
    for p in predictions {
        if p.study_id != first.study_id {
            return Err(CalibrationError::MixedStudies {
                first: first.study_id.clone(),
                other: p.study_id.clone(),
            });
        }
        check_probability(p.probability, &format!("series `{}`", p.series_id))?;
        by_view.entry(p.view).or_default().push(p.probability);
    }
    let per_view_probability: BTreeMap<View, f64> = by_view
        .into_iter()
        .map(|(v, mut ps)| (v, stable_mean(&mut ps)))
        .collect();
    let mut means: Vec<f64> = per_view_probability.values().copied().collect();
    Ok(EnsemblePrediction {
        study_id: first.study_id.clone(),
        views_present: per_view_probability.keys().copied().collect(),
        ensemble_probability: stable_mean(&mut means),
        per_view_probability,
    })
}

/// Groups scan predictions by study and ensembles each; output is sorted by
/// study id.
pub fn ensemble_by_study(predictions: &[ScanPrediction]) -> Result<Vec<EnsemblePrediction>, CalibrationError> {
    let mut groups: BTreeMap<&str, Vec<ScanPrediction>> = BTreeMap::new();
    for p in predictions {
        groups.entry(p.study_id.as_str()).or_default().push(p.clone());
    }
    groups.values().map(|g| ensemble_views(g)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibratedThreshold {
    pub value: f64,
    pub modality: Modality,
    #[serde(rename = "sens")]
    pub sens_at_threshold: f64,
    #[serde(rename = "spec")]
    pub spec_at_threshold: f64,
    pub method: String,
    /// SHA-256 of the manifest whose validation split produced the threshold.
    #[serde(default)]
    pub calibrated_on: Option<String>,
}

impl CalibratedThreshold {
    pub fn to_json(&self) -> Result<String, CalibrationError> {
        Ok(to_canonical_json(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), CalibrationError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        let t: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        check_probability(t.value, "threshold")?;
        if t.method != CALIBRATION_METHOD {
            return Err(CalibrationError::Domain(format!(
                "unknown calibration method `{}`",
                t.method
            )));
        }
        Ok(t)
    }
}

/// Counts at one cut of scores sorted ascending: how many are `>= threshold`.
fn count_at_least(sorted: &[f64], threshold: f64) -> usize {
    sorted.len() - sorted.partition_point(|&p| p < threshold)
}

/// Threshold grid: 0, one cut strictly between each pair of consecutive
/// unique scores, and 1.
pub fn candidate_grid(scores: &[f64]) -> Vec<f64> {
    let mut unique: Vec<f64> = scores.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let mut grid = Vec::with_capacity(unique.len() + 1);
    grid.push(0.0);
    for w in unique.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        // Adjacent floats can round the midpoint down onto the lower score;
        // any cut in (lo, hi] induces the same partition.
        grid.push(if mid > w[0] { mid } else { w[1] });
    }
    grid.push(1.0);
    grid
}

/// Operating point at one candidate, kept as integer counts so that
/// comparisons between candidates are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperatingPoint {
    pub tp: usize,
    pub tn: usize,
    pub positives: usize,
    pub negatives: usize,
}

impl OperatingPoint {
    /// `|sens - spec| * P * N`.
    pub fn scaled_gap(&self) -> u128 {
        let a = self.tp as u128 * self.negatives as u128;
        let b = self.tn as u128 * self.positives as u128;
        a.abs_diff(b)
    }

    /// `(sens + spec) * P * N`.
    pub fn scaled_sum(&self) -> u128 {
        self.tp as u128 * self.negatives as u128 + self.tn as u128 * self.positives as u128
    }

    pub fn sensitivity(&self) -> f64 {
        self.tp as f64 / self.positives as f64
    }

    pub fn specificity(&self) -> f64 {
        self.tn as f64 / self.negatives as f64
    }
}

pub fn operating_point(pos_sorted: &[f64], neg_sorted: &[f64], threshold: f64) -> OperatingPoint {
    OperatingPoint {
        tp: count_at_least(pos_sorted, threshold),
        tn: neg_sorted.len() - count_at_least(neg_sorted, threshold),
        positives: pos_sorted.len(),
        negatives: neg_sorted.len(),
    }
}

/// Picks the grid threshold minimizing `|sens - spec|`, then maximizing
/// `sens + spec`, then the smallest threshold.
pub fn calibrate_threshold(
    val_predictions: &[(EnsemblePrediction, Label)],
    modality: Modality,
) -> Result<CalibratedThreshold, CalibrationError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, label) in val_predictions {
        check_probability(p.ensemble_probability, &format!("study `{}`", p.study_id))?;
        if label.is_positive() {
            pos.push(p.ensemble_probability);
        } else {
            neg.push(p.ensemble_probability);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(CalibrationError::SingleClass {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let mut best: Option<(f64, OperatingPoint)> = None;
    // The grid ascends, so keeping the first of equal candidates keeps the
    // smallest threshold.
    for t in candidate_grid(&all) {
        let op = operating_point(&pos, &neg, t);
        let better = match &best {
            None => true,
            Some((_, b)) => {
                (op.scaled_gap(), std::cmp::Reverse(op.scaled_sum()))
                    < (b.scaled_gap(), std::cmp::Reverse(b.scaled_sum()))
            }
        };
        if better {
            best = Some((t, op));
        }
    }
    let (value, op) = best.expect("grid has at least two candidates");
    Ok(CalibratedThreshold {
        value,
        modality,
        sens_at_threshold: op.sensitivity(),
        spec_at_threshold: op.specificity(),
        method: CALIBRATION_METHOD.to_string(),
        calibrated_on: None,
    })
}

/// Tear iff the ensemble probability reaches the threshold.
pub fn apply_threshold(pred: &EnsemblePrediction, threshold: &CalibratedThreshold) -> Label {
    Label::from_positive(pred.ensemble_probability >= threshold.value)
}

/// One row of the predictions CSV. `ensemble_probability` repeats the
/// study-level value on each of its series; `decision` is empty before
/// calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub study_id: String,
    pub view: View,
    pub series_id: String,
    pub probability: f64,
    pub ensemble_probability: f64,
    pub decision: Option<Label>,
}

impl PredictionRow {
    pub fn scan_prediction(&self) -> ScanPrediction {
        ScanPrediction {
            study_id: self.study_id.clone(),
            series_id: self.series_id.clone(),
            view: self.view,
            probability: self.probability,
        }
    }
}

/// Rows sorted by (study, view, series).
pub fn prediction_rows(
    scans: &[ScanPrediction],
    threshold: Option<&CalibratedThreshold>,
) -> Result<Vec<PredictionRow>, CalibrationError> {
    let ensembles: BTreeMap<String, EnsemblePrediction> = ensemble_by_study(scans)?
        .into_iter()
        .map(|e| (e.study_id.clone(), e))
        .collect();
    let mut rows: Vec<PredictionRow> = scans
        .iter()
        .map(|s| {
            let e = &ensembles[&s.study_id];
            PredictionRow {
                study_id: s.study_id.clone(),
                view: s.view,
                series_id: s.series_id.clone(),
                probability: s.probability,
                ensemble_probability: e.ensemble_probability,
                decision: threshold.map(|t| apply_threshold(e, t)),
            }
        })
        .collect();
    rows.sort_by(|a, b| (&a.study_id, a.view, &a.series_id).cmp(&(&b.study_id, b.view, &b.series_id)));
    Ok(rows)
}

pub fn write_predictions_csv<W: Write>(rows: &[PredictionRow], writer: W) -> Result<(), CalibrationError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv<R: Read>(reader: R) -> Result<Vec<PredictionRow>, CalibrationError> {
    let mut rows = Vec::new();
    for r in csv::Reader::from_reader(reader).deserialize() {
        let row: PredictionRow = r?;
        check_probability(row.probability, &format!("series `{}`", row.series_id))?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scan(study: &str, view: View, series: &str, p: f64) -> ScanPrediction {
        ScanPrediction {
            study_id: study.into(),
            series_id: series.into(),
            view,
            probability: p,
        }
    }

    fn ens(id: &str, p: f64) -> EnsemblePrediction {
        EnsemblePrediction {
            study_id: id.into(),
            per_view_probability: BTreeMap::from([(View::Axial, p)]),
            ensemble_probability: p,
            views_present: BTreeSet::from([View::Axial]),
        }
    }

    fn labeled(pos: &[f64], neg: &[f64]) -> Vec<(EnsemblePrediction, Label)> {
        let mut v: Vec<_> = pos
            .iter()
            .enumerate()
            .map(|(i, &p)| (ens(&format!("p{i}"), p), Label::Tear))
            .collect();
        v.extend(
            neg.iter()
                .enumerate()
                .map(|(i, &p)| (ens(&format!("n{i}"), p), Label::NoTear)),
        );
        v
    }

    #[test]
    fn ensemble_examples() {
        let e = ensemble_views(&[
            scan("s", View::Sagittal, "a", 0.6),
            scan("s", View::Axial, "b", 0.9),
            scan("s", View::Coronal, "c", 0.9),
        ])
        .unwrap();
        assert!((e.ensemble_probability - 0.8).abs() < 1e-15);
        assert_eq!(e.views_present.len(), 3);

        let e = ensemble_views(&[scan("s", View::Axial, "a", 0.4), scan("s", View::Axial, "b", 0.6)]).unwrap();
        assert_eq!(e.per_view_probability[&View::Axial], 0.5);
        assert_eq!(e.ensemble_probability, 0.5);
        assert_eq!(e.views_present, BTreeSet::from([View::Axial]));

        // Nested, not pooled: (mean(0.2, 0.4) + 0.9) / 2 rather than 0.5.
        let e = ensemble_views(&[
            scan("s", View::Axial, "a", 0.2),
            scan("s", View::Axial, "b", 0.4),
            scan("s", View::Coronal, "c", 0.9),
        ])
        .unwrap();
        assert!((e.ensemble_probability - 0.6).abs() < 1e-15);
    }

    #[test]
    fn ensemble_errors() {
        assert!(matches!(ensemble_views(&[]), Err(CalibrationError::Empty)));
        assert!(matches!(
            ensemble_views(&[scan("a", View::Axial, "1", 0.5), scan("b", View::Axial, "2", 0.5)]),
            Err(CalibrationError::MixedStudies { .. })
        ));
        assert!(ensemble_views(&[scan("a", View::Axial, "1", f64::NAN)]).is_err());
    }

    #[test]
    fn ensemble_by_study_groups_and_sorts() {
        let out = ensemble_by_study(&[
            scan("b", View::Axial, "1", 0.2),
            scan("a", View::Axial, "2", 0.4),
            scan("b", View::Coronal, "3", 0.6),
        ])
        .unwrap();
        assert_eq!(out.iter().map(|e| e.study_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert!((out[1].ensemble_probability - 0.4).abs() < 1e-15);
    }

    #[test]
    fn separated_scores_select_the_smallest_perfect_midpoint() {
        let t = calibrate_threshold(&labeled(&[0.9, 0.8], &[0.1, 0.2]), Modality::Standard).unwrap();
        // Grid {0, 0.15, 0.5, 0.85, 1}; only 0.5 separates the classes.
        assert_eq!(t.value, 0.5);
        assert_eq!((t.sens_at_threshold, t.spec_at_threshold), (1.0, 1.0));
        assert_eq!(t.method, CALIBRATION_METHOD);
    }

    #[test]
    fn inverted_scores_close_the_gap_by_misclassifying_both() {
        // Grid {0, 0.5, 1}: (sens, spec) = (1, 0), (0, 0), (0, 1). Only the
        // midpoint closes the gap, at the cost of misclassifying both.
        let t = calibrate_threshold(&labeled(&[0.3], &[0.7]), Modality::Arthrogram).unwrap();
        assert_eq!(t.value, 0.5);
        assert_eq!((t.sens_at_threshold, t.spec_at_threshold), (0.0, 0.0));
    }

    #[test]
    fn gap_ties_break_on_sum_then_on_the_smaller_threshold() {
        // Grid {0, 0.15, 0.25, 1}: (1, 0), (1/2, 0), (1/2, 1), (0, 1). The
        // two gap-1/2 candidates differ in sum.
        let t = calibrate_threshold(&labeled(&[0.1, 0.3], &[0.2]), Modality::Standard).unwrap();
        assert_eq!(t.value, 0.25);
        assert_eq!((t.sens_at_threshold, t.spec_at_threshold), (0.5, 1.0));
        // Grid {0, 0.3, 0.7, 1}: (1, 0), (1, 1/2), (1/2, 1), (0, 1). Gap
        // and sum tie at 0.3 and 0.7.
        let t = calibrate_threshold(&labeled(&[0.5, 0.9], &[0.1, 0.5]), Modality::Standard).unwrap();
        assert_eq!(t.value, 0.3);
        assert_eq!((t.sens_at_threshold, t.spec_at_threshold), (1.0, 0.5));
    }

    #[test]
    fn single_class_validation_is_rejected() {
        assert!(matches!(
            calibrate_threshold(&labeled(&[0.3, 0.4], &[]), Modality::Standard),
            Err(CalibrationError::SingleClass {
                positives: 2,
                negatives: 0
            })
        ));
    }

    #[test]
    fn grid_cuts_between_adjacent_floats() {
        let lo = 0.3f64;
        let hi = f64::from_bits(lo.to_bits() + 1);
        let g = candidate_grid(&[hi, lo]);
        assert_eq!(g.len(), 3);
        assert!(g[1] > lo && g[1] <= hi);
    }

    #[test]
    fn apply_threshold_examples() {
        let std_t = CalibratedThreshold {
            value: 0.71,
            modality: Modality::Standard,
            sens_at_threshold: 1.0,
            spec_at_threshold: 1.0,
            method: CALIBRATION_METHOD.into(),
            calibrated_on: None,
        };
        let mra_t = CalibratedThreshold {
            value: 0.19,
            modality: Modality::Arthrogram,
            ..std_t.clone()
        };
        assert_eq!(apply_threshold(&ens("a", 0.72), &std_t), Label::Tear);
        assert_eq!(apply_threshold(&ens("a", 0.19), &mra_t), Label::Tear);
        assert_eq!(apply_threshold(&ens("a", 0.0), &mra_t), Label::NoTear);
    }

    #[test]
    fn threshold_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = CalibratedThreshold {
            value: 0.35,
            modality: Modality::Arthrogram,
            sens_at_threshold: 0.75,
            spec_at_threshold: 0.8,
            method: CALIBRATION_METHOD.into(),
            calibrated_on: Some("ab".repeat(32)),
        };
        let path = dir.path().join("threshold.json");
        t.write_json(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        for key in [
            "\"value\"",
            "\"modality\"",
            "\"sens\"",
            "\"spec\"",
            "\"method\"",
            "\"calibrated_on\"",
        ] {
            assert!(text.contains(key), "{key}");
        }
        assert_eq!(CalibratedThreshold::read_json(&path).unwrap(), t);
        fs::write(&path, text.replace("0.35", "1.5")).unwrap();
        assert!(CalibratedThreshold::read_json(&path).is_err());
    }

    #[test]
    fn predictions_csv_round_trip() {
        let scans = vec![
            scan("b", View::Coronal, "b2", 0.8),
            scan("b", View::Axial, "b1", 0.4),
            scan("a", View::Axial, "a1", 0.1),
        ];
        let t = CalibratedThreshold {
            value: 0.5,
            modality: Modality::Standard,
            sens_at_threshold: 1.0,
            spec_at_threshold: 1.0,
            method: CALIBRATION_METHOD.into(),
            calibrated_on: None,
        };
        let rows = prediction_rows(&scans, Some(&t)).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.series_id.as_str()).collect::<Vec<_>>(),
            ["a1", "b1", "b2"]
        );
        assert_eq!(rows[1].decision, Some(Label::Tear));
        let mut buf = Vec::new();
        write_predictions_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("study_id,view,series_id,probability,ensemble_probability,decision\n"));
        assert_eq!(read_predictions_csv(&buf[..]).unwrap(), rows);

        let undecided = prediction_rows(&scans, None).unwrap();
        let mut buf = Vec::new();
        write_predictions_csv(&undecided, &mut buf).unwrap();
        assert_eq!(read_predictions_csv(&buf[..]).unwrap()[0].decision, None);
    }

    fn views() -> impl Strategy<Value = View> {
        prop_oneof![Just(View::Sagittal), Just(View::Axial), Just(View::Coronal)]
    }

    proptest! {
        #[test]
        fn ensembling_is_order_invariant_and_bounded(
            preds in prop::collection::vec((views(), 0.0f64..=1.0), 1..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let scans: Vec<ScanPrediction> = preds.iter().enumerate().map(|(i, &(v, p))| scan("s", v, &i.to_string(), p)).collect();
            let mut shuffled = scans.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = ensemble_views(&scans).unwrap();
            prop_assert_eq!(&a, &ensemble_views(&shuffled).unwrap());
            let lo = a.per_view_probability.values().copied().fold(f64::INFINITY, f64::min);
            let hi = a.per_view_probability.values().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= a.ensemble_probability && a.ensemble_probability <= hi);
        }

        #[test]
        fn calibration_minimizes_the_gap_over_the_grid(
            pos in prop::collection::vec(0.0f64..=1.0, 1..20),
            neg in prop::collection::vec(0.0f64..=1.0, 1..20),
        ) {
            let set = labeled(&pos, &neg);
            let t = calibrate_threshold(&set, Modality::Standard).unwrap();
            prop_assert_eq!(&t, &calibrate_threshold(&set, Modality::Standard).unwrap());
            let gap = (t.sens_at_threshold - t.spec_at_threshold).abs();
            let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
            for c in candidate_grid(&all) {
                let sens = pos.iter().filter(|&&p| p >= c).count() as f64 / pos.len() as f64;
                let spec = neg.iter().filter(|&&p| p < c).count() as f64 / neg.len() as f64;
                prop_assert!(gap <= (sens - spec).abs() + 1e-12);
            }
        }

        #[test]
        fn separable_sets_calibrate_perfectly(
            neg in prop::collection::vec(0.0f64..0.5, 1..20),
            pos in prop::collection::vec(0.5f64..=1.0, 1..20),
        ) {
            let t = calibrate_threshold(&labeled(&pos, &neg), Modality::Standard).unwrap();
            prop_assert_eq!((t.sens_at_threshold, t.spec_at_threshold), (1.0, 1.0));
        }
    }
}
