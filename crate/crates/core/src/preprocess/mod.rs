//! Geometric and intensity preprocessing plus training-time augmentation.
//!
//! Every series goes through the same chain before reaching the model:
//! bilinear in-plane resize to 400x400, 224x224 center crop, z-scoring
//! with training-set statistics for the series' (sequence, fat-sat) key,
//! clamping to +/-4 standard deviations and an affine map onto [0, 1].

mod augment;
mod resample;
mod stats;

pub use augment::{augment, augment_copy, AugmentTarget, AugmentationConfig};
pub use resample::{center_crop, resize_and_crop, resize_bilinear, CROP_SIZE, RESIZE_SIZE};
pub use stats::{fit_intensity_stats, standardize_and_scale, IntensityStats, StatsEntry, StatsKey, CLAMP_SIGMA};

use thiserror::Error;

use crate::data::{ManifestError, VolumeError, VolumeScan};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("missing intensity statistics for key `{0}`")]
    MissingStats(String),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected}x{expected} slices, got {height}x{width}")]
    Shape {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("no training studies in manifest")]
    NoTrainingData,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("stats JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Resize, crop and intensity-normalize one series.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub stats: IntensityStats,
}

impl Preprocessor {
    pub fn new(stats: IntensityStats) -> Self {
        Self { stats }
    }

    pub fn apply(&self, scan: &VolumeScan) -> Result<VolumeScan, PreprocessError> {
        let cropped = resize_and_crop(scan);
        standardize_and_scale(&cropped, &self.stats)
    }
}

/// True when a scan already has the model's in-plane geometry.
pub fn is_preprocessed_shape(scan: &VolumeScan) -> bool {
    let (_, h, w) = scan.dims();
    h == CROP_SIZE && w == CROP_SIZE
}
