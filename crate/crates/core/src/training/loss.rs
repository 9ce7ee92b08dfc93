use super::TrainingError;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Class-weighted binary cross-entropy of a probability:
/// `-pos_weight * ln p` for a tear, `-ln(1 - p)` otherwise.
pub fn weighted_bce(probability: f64, positive: bool, pos_weight: f64) -> Result<f64, TrainingError> {
    if !(probability > 0.0 && probability < 1.0) {
        return Err(TrainingError::Domain(format!(
            "probability {probability} is outside (0, 1)"
        )));
    }
    check_pos_weight(pos_weight)?;
    let logit = (probability / (1.0 - probability)).ln();
    Ok(weighted_bce_logit(logit, positive, pos_weight).0)
}

pub(crate) fn check_pos_weight(pos_weight: f64) -> Result<(), TrainingError> {
    if pos_weight.is_finite() && pos_weight > 0.0 {
        Ok(())
    } else {
        Err(TrainingError::Domain(format!(
            "pos_weight must be finite and > 0, got {pos_weight}"
        )))
    }
}

/// Loss and its derivative with respect to the logit `z`.
///
/// `-ln sigmoid(z) = softplus(-z)` and `-ln(1 - sigmoid(z)) = softplus(z)`.
pub fn weighted_bce_logit(logit: f64, positive: bool, pos_weight: f64) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-logit).exp());
    if positive {
        (pos_weight * softplus(-logit), pos_weight * (p - 1.0))
    } else {
        (softplus(logit), p)
    }
}
