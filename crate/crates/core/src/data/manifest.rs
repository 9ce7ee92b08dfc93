//! Study-level dataset manifest, persisted as a one-row-per-series CSV.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::volume::{read_volume, Modality, SequenceType, View, VolumeError};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("study `{study_id}` is inconsistent across rows: {reason}")]
    InconsistentStudy { study_id: String, reason: String },
    #[error("duplicate study_id `{0}`")]
    DuplicateStudy(String),
    #[error("study `{0}` lists no series")]
    EmptyStudy(String),
    #[error("series {path} of study `{study_id}`: {source}")]
    Volume {
        study_id: String,
        path: String,
        #[source]
        source: VolumeError,
    },
    #[error("series {path} of study `{study_id}` does not match its manifest row: {reason}")]
    VolumeMismatch {
        study_id: String,
        path: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NoTear,
    Tear,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Tear
    }

    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Label::Tear
        } else {
            Label::NoTear
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Tear => "tear",
            Label::NoTear => "no_tear",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tear" => Ok(Label::Tear),
            "no_tear" => Ok(Label::NoTear),
            other => Err(format!("unknown label `{other}` (expected tear, no_tear)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!(
                "unknown split `{other}` (expected train, val, test, unassigned)"
            )),
        }
    }
}

/// Reference from a study to one of its series files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesRef {
    /// Path relative to the manifest's directory (or absolute).
    pub path: PathBuf,
    pub view: View,
    pub sequence_type: SequenceType,
    pub fat_sat: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub patient_id: String,
    pub label: Label,
    pub modality: Modality,
    pub split: Split,
    pub series: Vec<SeriesRef>,
}

impl StudyRecord {
    pub fn views(&self) -> impl Iterator<Item = &SeriesRef> {
        self.series.iter()
    }

    pub fn series_of(&self, view: View) -> impl Iterator<Item = &SeriesRef> {
        self.series.iter().filter(move |s| s.view == view)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub records: Vec<StudyRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    study_id: String,
    patient_id: String,
    modality: String,
    label: String,
    split: String,
    series_path: String,
    view: String,
    sequence_type: String,
    fat_sat: bool,
}

impl DatasetManifest {
    pub fn new(records: Vec<StudyRecord>) -> Result<Self, ManifestError> {
        let manifest = Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks the structural invariants: unique study ids and at least one
    /// series per study.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for rec in &self.records {
            if !seen.insert(rec.study_id.as_str()) {
                return Err(ManifestError::DuplicateStudy(rec.study_id.clone()));
            }
            if rec.series.is_empty() {
                return Err(ManifestError::EmptyStudy(rec.study_id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, study_id: &str) -> Option<&StudyRecord> {
        self.records.iter().find(|r| r.study_id == study_id)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &StudyRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Studies of one modality, keeping order.
    pub fn filter_modality(&self, modality: Modality) -> DatasetManifest {
        DatasetManifest {
            schema_version: self.schema_version,
            records: self
                .records
                .iter()
                .filter(|r| r.modality == modality)
                .cloned()
                .collect(),
        }
    }

    pub fn has_modality(&self, modality: Modality) -> bool {
        self.records.iter().any(|r| r.modality == modality)
    }

    pub fn resolve(root: &Path, series: &SeriesRef) -> PathBuf {
        if series.path.is_absolute() {
            series.path.clone()
        } else {
            root.join(&series.path)
        }
    }

    /// Confirms every referenced volume parses and agrees with the row that
    /// references it.
    pub fn verify_volumes(&self, root: &Path) -> Result<(), ManifestError> {
        for rec in &self.records {
            for series in &rec.series {
                let path = Self::resolve(root, series);
                let shown = path.display().to_string();
                let scan = read_volume(&path).map_err(|source| ManifestError::Volume {
                    study_id: rec.study_id.clone(),
                    path: shown.clone(),
                    source,
                })?;
                let mismatch = |reason: String| ManifestError::VolumeMismatch {
                    study_id: rec.study_id.clone(),
                    path: shown.clone(),
                    reason,
                };
                let m = &scan.meta;
                if m.study_id != rec.study_id {
                    return Err(mismatch(format!("file study_id `{}`", m.study_id)));
                }
                if m.modality != rec.modality {
                    return Err(mismatch(format!("file modality `{}`", m.modality)));
                }
                if m.view != series.view || m.sequence_type != series.sequence_type || m.fat_sat != series.fat_sat {
                    return Err(mismatch(format!(
                        "file is {}/{}/fs={}",
                        m.view, m.sequence_type, m.fat_sat
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<(), ManifestError> {
        let mut w = csv::Writer::from_writer(writer);
        for rec in &self.records {
            for s in &rec.series {
                w.serialize(ManifestRow {
                    study_id: rec.study_id.clone(),
                    patient_id: rec.patient_id.clone(),
                    modality: rec.modality.to_string(),
                    label: rec.label.to_string(),
                    split: rec.split.to_string(),
                    series_path: s.path.to_string_lossy().replace('\\', "/"),
                    view: s.view.to_string(),
                    sequence_type: s.sequence_type.to_string(),
                    fat_sat: s.fat_sat,
                })?;
            }
        }
        w.flush().map_err(|source| ManifestError::Io {
            path: "<manifest writer>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, ManifestError> {
        let mut buf = Vec::new();
        self.to_csv_writer(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv writer emits UTF-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.to_csv_writer(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, ManifestError> {
        let mut r = csv::Reader::from_reader(reader);
        let mut records: Vec<StudyRecord> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();

        for (i, row) in r.deserialize::<ManifestRow>().enumerate() {
            // Row numbers are 1-based and skip the header line.
            let row_no = i + 2;
            let row = row?;
            let bad = |reason: String| ManifestError::Row { row: row_no, reason };
            let modality: Modality = row.modality.parse().map_err(bad)?;
            let label: Label = row.label.parse().map_err(bad)?;
            let split: Split = row.split.parse().map_err(bad)?;
            let view: View = row.view.parse().map_err(bad)?;
            let sequence_type: SequenceType = row.sequence_type.parse().map_err(bad)?;
            if row.study_id.is_empty() {
                return Err(bad("empty study_id".into()));
            }
            let series = SeriesRef {
                path: PathBuf::from(&row.series_path),
                view,
                sequence_type,
                fat_sat: row.fat_sat,
            };

            match index.get(&row.study_id) {
                Some(&idx) => {
                    let rec = &mut records[idx];
                    let inconsistent = |what: &str| ManifestError::InconsistentStudy {
                        study_id: row.study_id.clone(),
                        reason: format!("{what} differs at row {row_no}"),
                    };
                    if rec.patient_id != row.patient_id {
                        return Err(inconsistent("patient_id"));
                    }
                    if rec.modality != modality {
                        return Err(inconsistent("modality"));
                    }
                    if rec.label != label {
                        return Err(inconsistent("label"));
                    }
                    if rec.split != split {
                        return Err(inconsistent("split"));
                    }
                    rec.series.push(series);
                }
                None => {
                    index.insert(row.study_id.clone(), records.len());
                    records.push(StudyRecord {
                        study_id: row.study_id,
                        patient_id: row.patient_id,
                        label,
                        modality,
                        split,
                        series: vec![series],
                    });
                }
            }
        }
        Self::new(records)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_reader(file)
    }
}
