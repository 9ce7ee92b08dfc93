use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::plot::RocSeries;
use super::roc::{bootstrap_roc, roc_auc, roc_curve, RocPoint, FPR_GRID_POINTS};
use super::{ConfusionCounts, MetricsError};
use crate::calibration::{CalibratedThreshold, EnsemblePrediction};
use crate::data::{Label, Modality, View};
use crate::util::{derive_seed, to_canonical_json};

/// Hold-out evaluation at a calibrated threshold. Serialized with sorted keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modality: Modality,
    /// Studies evaluated.
    pub n: usize,
    pub threshold: f64,
    pub confusion: ConfusionCounts,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    pub auc_ci_95: (f64, f64),
    /// Views whose studies include both classes.
    pub per_view_auc: BTreeMap<View, f64>,
    pub per_view_auc_ci_95: BTreeMap<View, (f64, f64)>,
    /// Non-degenerate resamples behind `auc_ci_95`.
    pub bootstrap_iterations: usize,
    pub bootstrap_requested: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(to_canonical_json(self)?)
    }
}

/// Bootstrap seed of a per-view curve; the ensemble curve uses `seed` itself.
pub fn view_seed(seed: u64, view: View) -> u64 {
    derive_seed(seed, &[b"view", view.as_str().as_bytes()])
}

/// Report plus the ensemble and per-view ROC curves with their bootstrap
/// bands, ensemble first.
pub fn evaluate_with_curves(
    test_predictions: &[(EnsemblePrediction, Label)],
    threshold: &CalibratedThreshold,
    iterations: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<RocSeries>), MetricsError> {
    let scores: Vec<(f64, bool)> = test_predictions
        .iter()
        .map(|(p, l)| (p.ensemble_probability, l.is_positive()))
        .collect();
    let confusion = ConfusionCounts::at_threshold(&scores, threshold.value);
    let (accuracy, sensitivity, specificity) = super::confusion_metrics(&confusion)?;
    let auc = roc_auc(&scores)?;
    let boot = bootstrap_roc(&scores, iterations, seed, FPR_GRID_POINTS)?;
    let mut curves = vec![RocSeries {
        name: "ensemble".into(),
        auc,
        auc_ci_95: boot.auc_ci_95,
        points: roc_curve(&scores)?,
        band: boot.band.clone(),
    }];

    let mut per_view_auc = BTreeMap::new();
    let mut per_view_auc_ci_95 = BTreeMap::new();
    for &view in View::ALL {
        let vs: Vec<(f64, bool)> = test_predictions
            .iter()
            .filter_map(|(p, l)| p.per_view_probability.get(&view).map(|&v| (v, l.is_positive())))
            .collect();
        if vs.is_empty() {
            continue;
        }
        let view_auc = match roc_auc(&vs) {
            Ok(a) => a,
            Err(MetricsError::SingleClass { .. }) => {
                log::warn!("{view} view has a single class among test studies; no per-view AUC");
                continue;
            }
            Err(e) => return Err(e),
        };
        let vb = bootstrap_roc(&vs, iterations, view_seed(seed, view), FPR_GRID_POINTS)?;
        per_view_auc.insert(view, view_auc);
        per_view_auc_ci_95.insert(view, vb.auc_ci_95);
        curves.push(RocSeries {
            name: view.as_str().into(),
            auc: view_auc,
            auc_ci_95: vb.auc_ci_95,
            points: roc_curve(&vs)?,
            band: vb.band,
        });
    }

    let report = EvalReport {
        modality: threshold.modality,
        n: scores.len(),
        threshold: threshold.value,
        confusion,
        accuracy,
        sensitivity,
        specificity,
        auc,
        auc_ci_95: boot.auc_ci_95,
        per_view_auc,
        per_view_auc_ci_95,
        bootstrap_iterations: boot.valid_iterations,
        bootstrap_requested: iterations,
        seed,
    };
    Ok((report, curves))
}

pub fn evaluate(
    test_predictions: &[(EnsemblePrediction, Label)],
    threshold: &CalibratedThreshold,
    iterations: usize,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    Ok(evaluate_with_curves(test_predictions, threshold, iterations, seed)?.0)
}

/// Writes `threshold,fpr,tpr` rows; the leading `+inf` threshold is
/// written as `inf`.
pub fn write_roc_csv<W: Write>(points: &[RocPoint], writer: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| MetricsError::Invalid(format!("writing ROC CSV: {e}"));
    for p in points {
        w.serialize(p).map_err(io)?;
    }
    w.flush()
        .map_err(|e| MetricsError::Invalid(format!("writing ROC CSV: {e}")))?;
    Ok(())
}
