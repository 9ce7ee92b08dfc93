//! Lazily materialized training examples. A scan is read (and optionally
//! preprocessed and augmented) only when the training loop reaches it, so a
//! tenfold-augmented training set never sits in memory at once.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{read_volume, DatasetManifest, Label, Modality, Split, View, VolumeScan};
use crate::preprocess::{augment_copy, AugmentationConfig, Preprocessor};

use super::TrainingError;

#[derive(Debug, Clone)]
pub enum ScanSource {
    Memory(Arc<VolumeScan>),
    /// A volume file, passed through `preprocessor` when one is given.
    File {
        path: PathBuf,
        preprocessor: Option<Arc<Preprocessor>>,
    },
}

#[derive(Debug, Clone)]
pub struct Example {
    pub study_id: String,
    pub modality: Modality,
    pub label: Label,
    pub source: ScanSource,
    /// Augmentation config and copy index for synthetic copies.
    pub augment: Option<(Arc<AugmentationConfig>, usize)>,
}

impl Example {
    pub fn from_scan(scan: VolumeScan, label: Label) -> Self {
        Self {
            study_id: scan.meta.study_id.clone(),
            modality: scan.meta.modality,
            label,
            source: ScanSource::Memory(Arc::new(scan)),
            augment: None,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label.is_positive()
    }

    pub fn load(&self) -> Result<VolumeScan, TrainingError> {
        let scan = match &self.source {
            ScanSource::Memory(s) => (**s).clone(),
            ScanSource::File { path, preprocessor } => {
                let raw = read_volume(path)?;
                match preprocessor {
                    Some(p) => p.apply(&raw)?,
                    None => raw,
                }
            }
        };
        match &self.augment {
            Some((cfg, copy)) => Ok(augment_copy(&scan, cfg, *copy)?),
            None => Ok(scan),
        }
    }
}

/// Appends `cfg.copies_per_scan` augmented copies after each eligible example.
pub fn with_augmentation(base: Vec<Example>, cfg: &AugmentationConfig) -> Result<Vec<Example>, TrainingError> {
    cfg.validate()?;
    let cfg = Arc::new(cfg.clone());
    let mut out = Vec::with_capacity(base.len());
    for ex in base {
        let copies = if ex.augment.is_none() && cfg.applies_to(ex.is_positive()) {
            cfg.copies_per_scan
        } else {
            0
        };
        let template = ex.clone();
        out.push(ex);
        for k in 0..copies {
            out.push(Example {
                augment: Some((cfg.clone(), k)),
                ..template.clone()
            });
        }
    }
    Ok(out)
}

/// A persisted augmented copy. Paths are relative to the data root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedFile {
    pub study_id: String,
    pub view: View,
    /// The preprocessed series the copy was made from.
    pub source: PathBuf,
    pub copy: usize,
    pub path: PathBuf,
}

/// Appends, after each file-backed example, the persisted copies of its
/// series in `files` order.
pub fn with_augmented_files(base: Vec<Example>, files: &[AugmentedFile], root: &Path) -> Vec<Example> {
    let mut out = Vec::with_capacity(base.len());
    for ex in base {
        let copies: Vec<Example> = match &ex.source {
            ScanSource::File { path, preprocessor } => files
                .iter()
                .filter(|f| f.study_id == ex.study_id && root.join(&f.source) == *path)
                .map(|f| Example {
                    source: ScanSource::File {
                        path: root.join(&f.path),
                        preprocessor: preprocessor.clone(),
                    },
                    ..ex.clone()
                })
                .collect(),
            ScanSource::Memory(_) => Vec::new(),
        };
        out.push(ex);
        out.extend(copies);
    }
    out
}

/// One example per series of `view` for every study in `split`, in
/// manifest order. Studies without that view contribute nothing.
pub fn examples_for_view(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
    view: View,
    preprocessor: Option<Arc<Preprocessor>>,
) -> Vec<Example> {
    manifest
        .in_split(split)
        .flat_map(|rec| {
            let preprocessor = preprocessor.clone();
            rec.series_of(view).map(move |series| Example {
                study_id: rec.study_id.clone(),
                modality: rec.modality,
                label: rec.label,
                source: ScanSource::File {
                    path: DatasetManifest::resolve(root, series),
                    preprocessor: preprocessor.clone(),
                },
                augment: None,
            })
        })
        .collect()
}
