use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::data::VolumeScan;
use crate::util::rng_from;

/// Which training scans receive augmented copies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentTarget {
    /// Only minority-class (tear) scans.
    #[default]
    PositiveOnly,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub copies_per_scan: usize,
    /// Maximum absolute rotation, degrees.
    pub rotation_limit: f64,
    /// Maximum absolute shift as a fraction of width/height.
    pub translation_limit: f64,
    pub scale_range: (f64, f64),
    /// Probability of a horizontal flip.
    pub flip_probability: f64,
    /// Additive noise standard deviation in [0, 1] intensity units.
    pub noise_sigma: f64,
    pub seed: u64,
    pub apply_to: AugmentTarget,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            copies_per_scan: 10,
            rotation_limit: 15.0,
            translation_limit: 0.1,
            scale_range: (0.9, 1.1),
            flip_probability: 0.5,
            noise_sigma: 0.01,
            seed: 0,
            apply_to: AugmentTarget::PositiveOnly,
        }
    }
}

impl AugmentationConfig {
    /// A configuration whose every copy equals its input.
    pub fn identity(copies: usize) -> Self {
        Self {
            copies_per_scan: copies,
            rotation_limit: 0.0,
            translation_limit: 0.0,
            scale_range: (1.0, 1.0),
            flip_probability: 0.0,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: &str| Err(PreprocessError::InvalidConfig(m.to_string()));
        let (lo, hi) = self.scale_range;
        if !(self.rotation_limit.is_finite() && self.rotation_limit >= 0.0) {
            return bad("rotation_limit must be finite and >= 0");
        }
        if !(self.translation_limit.is_finite() && self.translation_limit >= 0.0) {
            return bad("translation_limit must be finite and >= 0");
        }
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad("scale_range must satisfy 0 < low <= high");
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad("flip_probability must lie in [0, 1]");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and >= 0");
        }
        Ok(())
    }

    pub fn applies_to(&self, positive: bool) -> bool {
        match self.apply_to {
            AugmentTarget::All => true,
            AugmentTarget::PositiveOnly => positive,
        }
    }
}

/// One sampled transform, shared by every slice of a copy.
#[derive(Debug, Clone, Copy)]
struct Transform {
    angle: f64,
    shift_x: f64,
    shift_y: f64,
    scale: f64,
    flip: bool,
}

impl Transform {
    fn sample(cfg: &AugmentationConfig, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let mut symmetric = |limit: f64| limit * (2.0 * rng.random::<f64>() - 1.0);
        let angle = symmetric(cfg.rotation_limit).to_radians();
        let shift_x = symmetric(cfg.translation_limit) * w as f64;
        let shift_y = symmetric(cfg.translation_limit) * h as f64;
        let (lo, hi) = cfg.scale_range;
        let scale = lo + (hi - lo) * rng.random::<f64>();
        let flip = rng.random::<f64>() < cfg.flip_probability;
        Self {
            angle,
            shift_x,
            shift_y,
            scale,
            flip,
        }
    }

    /// Inverse-maps an output pixel to source coordinates.
    fn source(&self, cos: f64, sin: f64, cx: f64, cy: f64, x: f64, y: f64) -> (f64, f64) {
        let ux = x - cx - self.shift_x;
        let uy = y - cy - self.shift_y;
        let mut vx = (cos * ux + sin * uy) / self.scale;
        let vy = (cos * uy - sin * ux) / self.scale;
        if self.flip {
            vx = -vx;
        }
        (vx + cx, vy + cy)
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn bilinear_clamped(img: &ArrayView2<f32>, x: f64, y: f64) -> f64 {
    let (h, w) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = lerp(img[[y0, x0]] as f64, img[[y0, x1]] as f64, fx);
    let bottom = lerp(img[[y1, x0]] as f64, img[[y1, x1]] as f64, fx);
    lerp(top, bottom, fy)
}

/// Builds augmented copy number `copy` of `scan`.
///
/// Deterministic in `(cfg.seed, study_id, series_id, copy)`; the copy's
/// series id gets the suffix `-aug{copy}`.
pub fn augment_copy(scan: &VolumeScan, cfg: &AugmentationConfig, copy: usize) -> Result<VolumeScan, PreprocessError> {
    cfg.validate()?;
    let (s, h, w) = scan.dims();
    let mut rng = rng_from(
        cfg.seed,
        &[
            b"augment",
            scan.meta.study_id.as_bytes(),
            scan.meta.series_id.as_bytes(),
            &(copy as u64).to_le_bytes(),
        ],
    );
    let t = Transform::sample(cfg, h, w, &mut rng);
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).expect("validated sigma"))
    } else {
        None
    };
    let (cos, sin) = (t.angle.cos(), t.angle.sin());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    // The source coordinate grid is the same for every slice.
    let coords = Array2::from_shape_fn((h, w), |(i, j)| t.source(cos, sin, cx, cy, j as f64, i as f64));

    let mut out = Array3::<f32>::zeros((s, h, w));
    for (k, slice) in scan.voxels.axis_iter(Axis(0)).enumerate() {
        let mut dst = out.index_axis_mut(Axis(0), k);
        for ((i, j), v) in dst.indexed_iter_mut() {
            let (sx, sy) = coords[[i, j]];
            let mut value = bilinear_clamped(&slice, sx, sy);
            if let Some(n) = &noise {
                value += n.sample(&mut rng);
            }
            *v = value.clamp(0.0, 1.0) as f32;
        }
    }
    let mut result = scan.with_voxels(out);
    result.meta.series_id = format!("{}-aug{copy}", scan.meta.series_id);
    Ok(result)
}

/// All `cfg.copies_per_scan` augmented copies of a preprocessed scan.
pub fn augment(scan: &VolumeScan, cfg: &AugmentationConfig) -> Result<Vec<VolumeScan>, PreprocessError> {
    cfg.validate()?;
    let (_, h, w) = scan.dims();
    if h != super::CROP_SIZE || w != super::CROP_SIZE {
        return Err(PreprocessError::Shape {
            expected: super::CROP_SIZE,
            height: h,
            width: w,
        });
    }
    (0..cfg.copies_per_scan).map(|k| augment_copy(scan, cfg, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Modality, ScanMeta, SequenceType, Side, View};
    use crate::preprocess::CROP_SIZE;

    fn preprocessed(slices: usize) -> VolumeScan {
        let v = Array3::from_shape_fn((slices, CROP_SIZE, CROP_SIZE), |(k, i, j)| {
            (((k * 31 + i * 7 + j * 3) % 101) as f32) / 100.0
        });
        VolumeScan::new(
            v,
            ScanMeta {
                view: View::Sagittal,
                sequence_type: SequenceType::T1,
                fat_sat: false,
                modality: Modality::Arthrogram,
                series_id: "st1-sag-0".into(),
                study_id: "st1".into(),
                side: Side::Right,
            },
        )
        .unwrap()
    }

    #[test]
    fn default_config_yields_ten_copies() {
        let scan = preprocessed(2);
        let cfg = AugmentationConfig::default();
        let copies = augment(&scan, &cfg).unwrap();
        assert_eq!(copies.len(), 10);
        for (k, c) in copies.iter().enumerate() {
            assert_eq!(c.dims(), (2, CROP_SIZE, CROP_SIZE));
            assert_eq!(c.meta.series_id, format!("st1-sag-0-aug{k}"));
            assert_eq!(c.meta.view, scan.meta.view);
            assert!(c.voxels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // Copies differ from each other.
        assert_ne!(copies[0].voxels, copies[1].voxels);
    }

    #[test]
    fn identity_config_reproduces_input() {
        let scan = preprocessed(3);
        for c in augment(&scan, &AugmentationConfig::identity(4)).unwrap() {
            assert_eq!(c.voxels, scan.voxels);
        }
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let scan = preprocessed(2);
        let cfg = AugmentationConfig {
            seed: 99,
            copies_per_scan: 3,
            ..Default::default()
        };
        assert_eq!(augment(&scan, &cfg).unwrap(), augment(&scan, &cfg).unwrap());
        let other = AugmentationConfig {
            seed: 100,
            ..cfg.clone()
        };
        assert_ne!(augment(&scan, &cfg).unwrap(), augment(&scan, &other).unwrap());
    }

    #[test]
    fn pure_flip_mirrors_columns() {
        let scan = preprocessed(1);
        let cfg = AugmentationConfig {
            flip_probability: 1.0,
            ..AugmentationConfig::identity(1)
        };
        let c = augment_copy(&scan, &cfg, 0).unwrap();
        for i in [0, 50, 223] {
            for j in [0, 17, 223] {
                assert_eq!(c.voxels[[0, i, j]], scan.voxels[[0, i, CROP_SIZE - 1 - j]]);
            }
        }
    }

    #[test]
    fn rejects_wrong_geometry_and_bad_config() {
        let mut scan = preprocessed(1);
        scan.voxels = Array3::zeros((1, 10, 10));
        assert!(matches!(
            augment(&scan, &AugmentationConfig::default()),
            Err(PreprocessError::Shape { .. })
        ));
        let bad = AugmentationConfig {
            scale_range: (1.2, 1.1),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig {
            flip_probability: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
