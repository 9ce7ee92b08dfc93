//! Synthetic labelled phantoms: a bright ring tube standing in for the
//! labrum, seen through sagittal, axial and coronal slabs, with a spherical
//! defect at the anterior-inferior position in positive studies.
//!
//! Geometry lives in a world frame measured in in-plane voxels: `x` runs
//! left-right, `y` anterior (+) to posterior, `z` superior (+) to inferior.
//! The ring lies in the `y-z` plane, so sagittal slices show it whole and
//! axial or coronal slices cut it twice.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    write_volume, DatasetManifest, Label, ManifestError, Modality, ScanMeta, SequenceType, SeriesRef, Side, Split,
    StudyRecord, View, VolumeError, VolumeScan,
};
use crate::util::{derive_seed, rng_from, to_canonical_json};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub n_studies: usize,
    pub positive_fraction: f64,
    /// `(slices, height, width)` of every series.
    pub dims: (usize, usize, usize),
    pub views_per_study: BTreeSet<View>,
    pub sequences_per_view: usize,
    /// Defect sphere radius in voxels.
    pub defect_size: f64,
    /// Intensity added inside the defect, in ring-contrast units.
    pub defect_contrast: f64,
    pub noise_sigma: f64,
    /// Fraction of studies that are arthrograms.
    pub modality_mix: f64,
    /// Arthrogram multiplier on ring, background and defect contrast.
    pub arthrogram_contrast: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_studies: 100,
            positive_fraction: 0.3,
            dims: (8, 64, 64),
            views_per_study: View::ALL.iter().copied().collect(),
            sequences_per_view: 1,
            defect_size: 6.0,
            defect_contrast: 0.3,
            noise_sigma: 0.15,
            modality_mix: 0.0,
            arthrogram_contrast: 2.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Positive count, `round(positive_fraction * n_studies)`.
    pub fn n_positive(&self) -> usize {
        (self.positive_fraction * self.n_studies as f64).round() as usize
    }

    pub fn n_arthrogram(&self) -> usize {
        (self.modality_mix * self.n_studies as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let (s, h, w) = self.dims;
        if self.n_studies < 2 {
            return bad(format!("n_studies must be >= 2, got {}", self.n_studies));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!(
                "positive_fraction must lie in (0, 1), got {}",
                self.positive_fraction
            ));
        }
        let pos = self.n_positive();
        if pos < 1 || pos >= self.n_studies {
            return bad(format!(
                "positive_fraction {} of {} studies leaves a class empty",
                self.positive_fraction, self.n_studies
            ));
        }
        if s < 2 || h < 16 || w < 16 {
            return bad(format!("dims must be at least 2x16x16, got {s}x{h}x{w}"));
        }
        if self.views_per_study.is_empty() || self.sequences_per_view == 0 {
            return bad("at least one view and one sequence per view are required".into());
        }
        if !(self.defect_size >= 1.0 && self.defect_size.is_finite()) {
            return bad(format!("defect_size must be >= 1, got {}", self.defect_size));
        }
        if !(self.defect_contrast.is_finite() && self.defect_contrast >= 0.0) {
            return bad(format!(
                "defect_contrast must be finite and >= 0, got {}",
                self.defect_contrast
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.modality_mix) {
            return bad(format!("modality_mix must lie in [0, 1], got {}", self.modality_mix));
        }
        if !(self.arthrogram_contrast.is_finite() && self.arthrogram_contrast > 0.0) {
            return bad(format!(
                "arthrogram_contrast must be > 0, got {}",
                self.arthrogram_contrast
            ));
        }
        Ok(())
    }

    /// Ring major radius in voxels; the ring stays inside the central crop
    /// the preprocessor keeps.
    fn ring_radius(&self) -> f64 {
        0.2 * self.dims.1.min(self.dims.2) as f64
    }
}

/// Scanner gain and offset per sequence and fat-saturation setting.
pub fn sequence_response(sequence: SequenceType, fat_sat: bool) -> (f64, f64) {
    let (gain, offset) = match sequence {
        SequenceType::T1 => (420.0, 310.0),
        SequenceType::T2 => (260.0, 140.0),
        SequenceType::Pd => (510.0, 380.0),
        SequenceType::Merge => (330.0, 220.0),
        SequenceType::Stir => (180.0, 60.0),
    };
    if fat_sat {
        (0.7 * gain, 0.5 * offset)
    } else {
        (gain, offset)
    }
}

/// Structure-unit intensities of the tissue around the ring.
const GLENOID_LEVEL: f64 = 0.35;
const HEAD_LEVEL: f64 = 0.5;

/// Sequence protocol cycled through by each view.
const PROTOCOL: [(SequenceType, bool); 5] = [
    (SequenceType::Pd, true),
    (SequenceType::T2, true),
    (SequenceType::T1, false),
    (SequenceType::Merge, false),
    (SequenceType::Stir, true),
];

fn view_index(view: View) -> usize {
    View::ALL.iter().position(|&v| v == view).expect("view in ALL")
}

/// Everything needed to re-render one series bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesParams {
    pub series_id: String,
    pub view: View,
    pub sequence_type: SequenceType,
    pub fat_sat: bool,
    pub noise_seed: u64,
    pub path: PathBuf,
}

/// Per-study generation parameters, recorded in the provenance file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyParams {
    pub study_id: String,
    pub patient_id: String,
    pub label: Label,
    pub modality: Modality,
    pub side: Side,
    /// Ring centre offset from the volume centre, `(x, y, z)` voxels.
    pub center: (f64, f64, f64),
    pub ring_radius: f64,
    pub tube_radius: f64,
    /// Overall intensity multiplier of the study.
    pub intensity_scale: f64,
    /// Structure-unit contrast of ring over background.
    pub contrast: f64,
    /// Angle of the defect on the ring in the `y-z` plane, radians from +y.
    pub defect_angle: f64,
    /// Defect centre in world coordinates, present for tears only.
    pub defect_center: Option<(f64, f64, f64)>,
    pub defect_radius: f64,
    pub defect_contrast: f64,
    pub noise_sigma: f64,
    pub dims: (usize, usize, usize),
    pub series: Vec<SeriesParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: PhantomConfig,
    pub studies: Vec<StudyParams>,
}

/// Soft indicator of `d < radius` with a half-voxel edge.
fn soft_inside(d: f64, radius: f64) -> f64 {
    1.0 / (1.0 + ((d - radius) / 0.5).exp())
}

/// Noise-free structure at a world point: glenoid disc and humeral head
/// as mid-grey tissue, the ring tube over them, and the defect on top.
fn structure(p: &StudyParams, x: f64, y: f64, z: f64) -> f64 {
    let (cx, cy, cz) = p.center;
    let (dx, dy, dz) = (x - cx, y - cy, z - cz);
    let radial = (dy * dy + dz * dz).sqrt();
    let q = radial - p.ring_radius;
    let ring = soft_inside((q * q + dx * dx).sqrt(), p.tube_radius);
    let depth = 1.5 * p.tube_radius;
    let glenoid = GLENOID_LEVEL * soft_inside(radial, p.ring_radius) * soft_inside((dx + depth).abs(), depth);
    let head_d = ((dx - p.ring_radius).powi(2) + dy * dy + dz * dz).sqrt();
    let head = HEAD_LEVEL * soft_inside(head_d, p.ring_radius);
    let tissue = glenoid.max(head);
    let defect = match p.defect_center {
        Some((ex, ey, ez)) => {
            let d = ((x - ex).powi(2) + (y - ey).powi(2) + (z - ez).powi(2)).sqrt();
            p.defect_contrast * soft_inside(d, p.defect_radius)
        }
        None => 0.0,
    };
    p.contrast * (tissue + (1.0 - tissue) * ring + defect)
}

/// Half-extent of the slab a view samples, centred on the volume centre.
fn slab_half_extent(p: &StudyParams, view: View) -> f64 {
    match view {
        View::Sagittal => p.tube_radius + p.defect_radius + 2.0,
        View::Axial | View::Coronal => p.ring_radius + p.tube_radius + 2.0,
    }
}

/// World coordinates of voxel `(k, i, j)` of a series.
///
/// Rows run from superior to inferior (or anterior to posterior in axial
/// slices); columns run along the remaining in-plane axis.
fn world(p: &StudyParams, view: View, k: usize, i: usize, j: usize) -> (f64, f64, f64) {
    let (s, h, w) = p.dims;
    let half = slab_half_extent(p, view);
    let t = -half + 2.0 * half * k as f64 / (s - 1) as f64;
    let row = (h as f64 - 1.0) / 2.0 - i as f64;
    let col = j as f64 - (w as f64 - 1.0) / 2.0;
    match view {
        View::Sagittal => (t, col, row),
        View::Axial => (col, row, t),
        View::Coronal => (col, t, row),
    }
}

/// Renders one series from its recorded parameters.
pub fn render_series(p: &StudyParams, series: &SeriesParams) -> Result<VolumeScan, SynthError> {
    let (s, h, w) = p.dims;
    let (gain, offset) = sequence_response(series.sequence_type, series.fat_sat);
    let gain = gain * p.intensity_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(series.noise_seed);
    let noise = Normal::new(0.0, p.noise_sigma.max(0.0)).map_err(|e| SynthError::Config(e.to_string()))?;
    let mut voxels = Array3::<f32>::zeros((s, h, w));
    for k in 0..s {
        for i in 0..h {
            for j in 0..w {
                let (x, y, z) = world(p, series.view, k, i, j);
                let e: f64 = if p.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                voxels[[k, i, j]] = (offset + gain * (structure(p, x, y, z) + e)) as f32;
            }
        }
    }
    let meta = ScanMeta {
        view: series.view,
        sequence_type: series.sequence_type,
        fat_sat: series.fat_sat,
        modality: p.modality,
        series_id: series.series_id.clone(),
        study_id: p.study_id.clone(),
        side: p.side,
    };
    Ok(VolumeScan::new(voxels, meta)?)
}

/// Labels and modalities for every study: exact positive count, positives
/// spread across modalities in proportion.
fn assign_strata(cfg: &PhantomConfig) -> Vec<(Label, Modality)> {
    let n = cfg.n_studies;
    let n_pos = cfg.n_positive();
    let n_arth = cfg.n_arthrogram();
    let pos_arth = ((n_pos * n_arth) as f64 / n as f64).round() as usize;
    let pos_arth = pos_arth.min(n_arth).min(n_pos);
    let mut strata = Vec::with_capacity(n);
    strata.extend(std::iter::repeat_n((Label::Tear, Modality::Arthrogram), pos_arth));
    strata.extend(std::iter::repeat_n((Label::Tear, Modality::Standard), n_pos - pos_arth));
    strata.extend(std::iter::repeat_n(
        (Label::NoTear, Modality::Arthrogram),
        n_arth - pos_arth,
    ));
    strata.extend(std::iter::repeat_n(
        (Label::NoTear, Modality::Standard),
        n - n_pos - (n_arth - pos_arth),
    ));
    strata.shuffle(&mut rng_from(cfg.seed, &[b"strata"]));
    strata
}

/// Draws every study's parameters; no files are touched.
pub fn plan_phantoms(cfg: &PhantomConfig) -> Result<Vec<StudyParams>, SynthError> {
    cfg.validate()?;
    let r = cfg.ring_radius();
    let mut studies = Vec::with_capacity(cfg.n_studies);
    for (idx, (label, modality)) in assign_strata(cfg).into_iter().enumerate() {
        let study_id = format!("phantom-{idx:04}");
        let mut rng = rng_from(cfg.seed, &[b"study", study_id.as_bytes()]);
        let center = (
            rng.random_range(-1.0..1.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let ring_radius = r * rng.random_range(0.92..1.08);
        let tube_radius = (0.05 * cfg.dims.1.min(cfg.dims.2) as f64).max(1.5) * rng.random_range(0.9..1.1);
        let intensity_scale = rng.random_range(0.9..1.1);
        let side = if rng.random_bool(0.5) { Side::Right } else { Side::Left };
        // Anterior-inferior quadrant, around -45 degrees from +y.
        let defect_angle = (-45.0f64 + rng.random_range(-12.0..12.0)).to_radians();
        let defect_center = label.is_positive().then(|| {
            (
                center.0,
                center.1 + ring_radius * defect_angle.cos(),
                center.2 + ring_radius * defect_angle.sin(),
            )
        });
        let contrast = match modality {
            Modality::Standard => 1.0,
            Modality::Arthrogram => cfg.arthrogram_contrast,
        };
        let mut series = Vec::new();
        for &view in &cfg.views_per_study {
            for j in 0..cfg.sequences_per_view {
                let (sequence_type, fat_sat) = PROTOCOL[(j + view_index(view)) % PROTOCOL.len()];
                let series_id = format!("{study_id}-{}-{j}", view.as_str());
                series.push(SeriesParams {
                    noise_seed: derive_seed(cfg.seed, &[b"noise", series_id.as_bytes()]),
                    path: PathBuf::from("volumes")
                        .join(&study_id)
                        .join(format!("{series_id}.mvol")),
                    series_id,
                    view,
                    sequence_type,
                    fat_sat,
                });
            }
        }
        studies.push(StudyParams {
            patient_id: format!("patient-{idx:04}"),
            study_id,
            label,
            modality,
            side,
            center,
            ring_radius,
            tube_radius,
            intensity_scale,
            contrast,
            defect_angle,
            defect_center,
            defect_radius: cfg.defect_size,
            defect_contrast: cfg.defect_contrast,
            noise_sigma: cfg.noise_sigma,
            dims: cfg.dims,
            series,
        });
    }
    Ok(studies)
}

/// Manifest of planned studies, every study unassigned.
pub fn phantom_manifest(studies: &[StudyParams]) -> Result<DatasetManifest, SynthError> {
    let records = studies
        .iter()
        .map(|p| StudyRecord {
            study_id: p.study_id.clone(),
            patient_id: p.patient_id.clone(),
            label: p.label,
            modality: p.modality,
            split: Split::Unassigned,
            series: p
                .series
                .iter()
                .map(|s| SeriesRef {
                    path: s.path.clone(),
                    view: s.view,
                    sequence_type: s.sequence_type,
                    fat_sat: s.fat_sat,
                })
                .collect(),
        })
        .collect();
    Ok(DatasetManifest::new(records)?)
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Writes MVOL files, `manifest.csv` and `provenance.json` under `out_dir`.
pub fn generate_phantoms(cfg: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    let studies = plan_phantoms(cfg)?;
    for p in &studies {
        fs::create_dir_all(out_dir.join("volumes").join(&p.study_id))?;
        for s in &p.series {
            write_volume(&render_series(p, s)?, out_dir.join(&s.path))?;
        }
    }
    let manifest = phantom_manifest(&studies)?;
    manifest.write_csv(out_dir.join(MANIFEST_FILE))?;
    let provenance = Provenance {
        config: cfg.clone(),
        studies,
    };
    fs::write(out_dir.join(PROVENANCE_FILE), to_canonical_json(&provenance)?)?;
    Ok(manifest)
}

pub fn read_provenance(path: impl AsRef<Path>) -> Result<Provenance, SynthError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
