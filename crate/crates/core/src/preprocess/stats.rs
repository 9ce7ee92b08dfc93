use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{resize_and_crop, PreprocessError};
use crate::data::{read_volume, DatasetManifest, SequenceType, Split, VolumeScan};
use crate::util::CompensatedSum;

/// Standardized intensities are clamped to this many standard deviations
/// before being mapped onto [0, 1].
pub const CLAMP_SIGMA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StatsKey {
    pub sequence_type: SequenceType,
    pub fat_sat: bool,
}

impl StatsKey {
    pub fn of(scan: &VolumeScan) -> Self {
        Self {
            sequence_type: scan.meta.sequence_type,
            fat_sat: scan.meta.fat_sat,
        }
    }
}

impl fmt::Display for StatsKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|fs={}", self.sequence_type, self.fat_sat)
    }
}

impl FromStr for StatsKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (seq, fs) = s
            .split_once("|fs=")
            .ok_or_else(|| format!("malformed stats key `{s}`"))?;
        let fat_sat = match fs {
            "true" => true,
            "false" => false,
            _ => return Err(format!("malformed fat-sat flag in `{s}`")),
        };
        Ok(Self {
            sequence_type: seq.parse()?,
            fat_sat,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsEntry {
    pub mean: f64,
    pub std: f64,
    pub n: u64,
}

/// Per-(sequence, fat-sat) intensity mean and standard deviation.
///
/// Serialized as `{"T1|fs=false": {"mean": .., "std": .., "n": ..}, ..}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IntensityStats {
    entries: BTreeMap<StatsKey, StatsEntry>,
}

impl Serialize for IntensityStats {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<String, StatsEntry> = self.entries.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        map.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for IntensityStats {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, StatsEntry>::deserialize(deserializer)?;
        let mut entries = BTreeMap::new();
        for (k, v) in map {
            let key: StatsKey = k.parse().map_err(serde::de::Error::custom)?;
            if !(v.std > 0.0 && v.std.is_finite() && v.mean.is_finite() && v.n >= 1) {
                return Err(serde::de::Error::custom(format!(
                    "invalid statistics for `{k}`: std must be positive and n >= 1"
                )));
            }
            entries.insert(key, v);
        }
        Ok(Self { entries })
    }
}

#[derive(Default)]
struct Accumulator {
    sum: CompensatedSum,
    sum_sq: CompensatedSum,
    n: u64,
}

impl Accumulator {
    fn add_scan(&mut self, scan: &VolumeScan) {
        // Accumulate per scan first, then merge, so the result depends on
        // scan order only through compensated additions.
        let mut sum = CompensatedSum::default();
        let mut sum_sq = CompensatedSum::default();
        for &v in scan.voxels.iter() {
            let v = v as f64;
            sum.add(v);
            sum_sq.add(v * v);
        }
        self.sum.merge(&sum);
        self.sum_sq.merge(&sum_sq);
        self.n += scan.voxels.len() as u64;
    }

    fn finish(&self, key: StatsKey) -> StatsEntry {
        let n = self.n as f64;
        let mean = self.sum.value() / n;
        let var = (self.sum_sq.value() / n - mean * mean).max(0.0);
        let mut std = var.sqrt();
        // Relative floor: anything below this is rounding noise on a
        // constant input.
        if std <= 1e-12 * mean.abs().max(1.0) {
            log::warn!("intensity key {key} has zero variance; using std = 1");
            std = 1.0;
        }
        StatsEntry { mean, std, n: self.n }
    }
}

impl IntensityStats {
    /// Fits statistics from already-cropped training scans.
    pub fn fit<'a>(scans: impl IntoIterator<Item = &'a VolumeScan>) -> Self {
        let mut acc: BTreeMap<StatsKey, Accumulator> = BTreeMap::new();
        for scan in scans {
            acc.entry(StatsKey::of(scan)).or_default().add_scan(scan);
        }
        Self {
            entries: acc.iter().map(|(k, a)| (*k, a.finish(*k))).collect(),
        }
    }

    pub fn get(&self, key: &StatsKey) -> Option<&StatsEntry> {
        self.entries.get(key)
    }

    pub fn entry_for(&self, key: &StatsKey) -> Result<&StatsEntry, PreprocessError> {
        self.entries
            .get(key)
            .ok_or_else(|| PreprocessError::MissingStats(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &StatsKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> Result<String, PreprocessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, PreprocessError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Fits intensity statistics from the training split of `manifest`.
///
/// Statistics are taken over the resized and cropped voxels, which is the
/// domain they are later applied to. Only training-split volumes are read.
pub fn fit_intensity_stats(manifest: &DatasetManifest, root: &Path) -> Result<IntensityStats, PreprocessError> {
    let mut all_keys = BTreeSet::new();
    for rec in &manifest.records {
        for s in &rec.series {
            all_keys.insert(StatsKey {
                sequence_type: s.sequence_type,
                fat_sat: s.fat_sat,
            });
        }
    }

    let mut acc: BTreeMap<StatsKey, Accumulator> = BTreeMap::new();
    let mut any_train = false;
    for rec in manifest.in_split(Split::Train) {
        any_train = true;
        for series in &rec.series {
            let scan = read_volume(DatasetManifest::resolve(root, series))?;
            let cropped = resize_and_crop(&scan);
            acc.entry(StatsKey::of(&cropped)).or_default().add_scan(&cropped);
        }
    }
    if !any_train {
        return Err(PreprocessError::NoTrainingData);
    }
    if let Some(missing) = all_keys.iter().find(|k| !acc.contains_key(k)) {
        return Err(PreprocessError::MissingStats(missing.to_string()));
    }
    Ok(IntensityStats {
        entries: acc.iter().map(|(k, a)| (*k, a.finish(*k))).collect(),
    })
}

/// z-score with the key's statistics, clamp to +/-4, map onto [0, 1].
pub fn standardize_and_scale(scan: &VolumeScan, stats: &IntensityStats) -> Result<VolumeScan, PreprocessError> {
    let entry = stats.entry_for(&StatsKey::of(scan))?;
    let (mean, std) = (entry.mean, entry.std);
    let voxels = scan.voxels.mapv(|v| {
        let z = ((v as f64 - mean) / std).clamp(-CLAMP_SIGMA, CLAMP_SIGMA);
        ((z + CLAMP_SIGMA) / (2.0 * CLAMP_SIGMA)) as f32
    });
    Ok(scan.with_voxels(voxels))
}
