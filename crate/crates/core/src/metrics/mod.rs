//! Evaluation statistics: confusion rates, ROC/AUC with bootstrap
//! intervals, rater agreement and cohort tests.

pub mod agreement;
pub mod hypothesis;
pub mod plot;
pub mod report;
pub mod roc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agreement::{fleiss_kappa, fleiss_kappa_counts};
pub use hypothesis::{chi_squared_test, welchless_t_test};
pub use plot::{render_roc_svg, RocSeries};
pub use report::{evaluate, evaluate_with_curves, write_roc_csv, EvalReport};
pub use roc::{
    bootstrap_auc_ci, bootstrap_roc, percentile, roc_auc, roc_curve, BootstrapRoc, RocPoint, FPR_GRID_POINTS,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{rate} is undefined: its denominator is zero")]
    UndefinedRate { rate: &'static str },
    #[error("AUC needs both classes, found {positives} positive and {negatives} negative")]
    SingleClass { positives: usize, negatives: usize },
    #[error("bootstrap failed: {0}")]
    Bootstrap(String),
    #[error("kappa is undefined: {0}")]
    UndefinedKappa(String),
    #[error("test assumption violated: {0}")]
    TestAssumption(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("plot error: {0}")]
    Plot(String),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts for the rule "positive iff score >= threshold".
    pub fn at_threshold(scores: &[(f64, bool)], threshold: f64) -> Self {
        let mut c = Self::default();
        for &(s, positive) in scores {
            match (s >= threshold, positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> Result<f64, MetricsError> {
        ratio(self.tp + self.tn, self.total(), "accuracy")
    }

    pub fn sensitivity(&self) -> Result<f64, MetricsError> {
        ratio(self.tp, self.tp + self.fn_, "sensitivity")
    }

    pub fn specificity(&self) -> Result<f64, MetricsError> {
        ratio(self.tn, self.tn + self.fp, "specificity")
    }
}

fn ratio(num: u64, den: u64, rate: &'static str) -> Result<f64, MetricsError> {
    if den == 0 {
        Err(MetricsError::UndefinedRate { rate })
    } else {
        Ok(num as f64 / den as f64)
    }
}

/// `(accuracy, sensitivity, specificity)`.
pub fn confusion_metrics(c: &ConfusionCounts) -> Result<(f64, f64, f64), MetricsError> {
    Ok((c.accuracy()?, c.sensitivity()?, c.specificity()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round4(x: f64) -> f64 {
        (x * 1e4).round() / 1e4
    }

    #[test]
    fn table_rates() {
        let sens = ConfusionCounts {
            tp: 5,
            fn_: 1,
            ..Default::default()
        }
        .sensitivity()
        .unwrap();
        assert_eq!(round4(sens), 0.8333);
        let spec = ConfusionCounts {
            tn: 25,
            fp: 4,
            ..Default::default()
        }
        .specificity()
        .unwrap();
        assert_eq!(round4(spec), 0.8621);
        let sens = ConfusionCounts {
            tp: 14,
            fn_: 3,
            ..Default::default()
        }
        .sensitivity()
        .unwrap();
        assert_eq!(round4(sens), 0.8235);
        let c = ConfusionCounts {
            tp: 14,
            fp: 4,
            tn: 25,
            fn_: 3,
        };
        let (acc, _, _) = confusion_metrics(&c).unwrap();
        assert_eq!(round4(acc), 0.8478);
    }

    #[test]
    fn zero_denominators_name_the_rate() {
        let c = ConfusionCounts {
            tn: 3,
            fp: 1,
            ..Default::default()
        };
        let err = confusion_metrics(&c).unwrap_err();
        assert!(matches!(err, MetricsError::UndefinedRate { rate: "sensitivity" }));
        assert!(err.to_string().contains("sensitivity"));
        assert!(matches!(
            ConfusionCounts {
                tp: 1,
                ..Default::default()
            }
            .specificity(),
            Err(MetricsError::UndefinedRate { rate: "specificity" })
        ));
        assert!(ConfusionCounts::default().accuracy().is_err());
    }

    #[test]
    fn threshold_counts_use_at_least() {
        let s = [(0.5, true), (0.49, true), (0.5, false), (0.1, false)];
        assert_eq!(
            ConfusionCounts::at_threshold(&s, 0.5),
            ConfusionCounts {
                tp: 1,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        let all = ConfusionCounts::at_threshold(&s, 0.0);
        assert_eq!((all.tp, all.fp, all.sensitivity().unwrap()), (2, 2, 1.0));
    }

    #[test]
    fn serialized_field_is_fn() {
        let json = serde_json::to_string(&ConfusionCounts {
            tp: 1,
            fp: 2,
            tn: 3,
            fn_: 4,
        })
        .unwrap();
        assert_eq!(json, r#"{"tp":1,"fp":2,"tn":3,"fn":4}"#);
    }
}
