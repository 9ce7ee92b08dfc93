//! Patient-grouped stratified train/val/test assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::manifest::{DatasetManifest, Label, Split};
use super::volume::Modality;
use crate::util::rng_from;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("split fractions must be positive and sum to 1 (got {train}, {val}, {test})")]
    InvalidFractions { train: f64, val: f64, test: f64 },
    #[error("stratification error: stratum ({label}, {modality}) has no studies")]
    EmptyStratum { label: Label, modality: Modality },
    #[error("manifest has no studies")]
    EmptyManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), SplitError> {
        let parts = [self.train, self.val, self.test];
        let ok = parts.iter().all(|f| f.is_finite() && *f > 0.0) && (parts.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(SplitError::InvalidFractions {
                train: self.train,
                val: self.val,
                test: self.test,
            })
        }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// How strata with a missing class are treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifyMode {
    /// Every modality present must contain both labels.
    #[default]
    Strict,
    /// Stratify over whichever strata are non-empty.
    SingleClass,
}

pub type Stratum = (Label, Modality);

/// Largest-remainder apportionment of `n` items; ties go to the earlier
/// split (train, then val, then test).
pub fn apportion(n: usize, fractions: &SplitFractions) -> [usize; 3] {
    const EPS: f64 = 1e-9;
    let quotas = fractions.as_array().map(|f| f * n as f64);
    let mut counts = quotas.map(|q| (q + EPS).floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut remaining = n.saturating_sub(assigned);
    let mut order = [0usize, 1, 2];
    let frac = |i: usize| {
        let r = quotas[i] - counts[i] as f64;
        if r < EPS {
            0.0
        } else {
            r
        }
    };
    order.sort_by(|&a, &b| {
        let (fa, fb) = (frac(a), frac(b));
        if (fa - fb).abs() <= EPS {
            a.cmp(&b)
        } else {
            fb.partial_cmp(&fa).expect("finite remainders")
        }
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

fn split_index(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
        Split::Unassigned => unreachable!("only assigned splits are indexed"),
    }
}

/// Assigns every study to train/val/test.
///
/// Strata are `(label, modality)`; within each stratum the target counts come
/// from [`apportion`]. All studies of one patient land in the same split.
/// When every patient has a single study the per-stratum counts equal the
/// targets exactly.
pub fn stratified_split(
    manifest: &DatasetManifest,
    fractions: &SplitFractions,
    seed: u64,
    mode: StratifyMode,
) -> Result<DatasetManifest, SplitError> {
    fractions.validate()?;
    if manifest.is_empty() {
        return Err(SplitError::EmptyManifest);
    }

    let mut stratum_sizes: BTreeMap<Stratum, usize> = BTreeMap::new();
    for rec in &manifest.records {
        *stratum_sizes.entry((rec.label, rec.modality)).or_default() += 1;
    }
    if mode == StratifyMode::Strict {
        let modalities: Vec<Modality> = Modality::ALL
            .iter()
            .copied()
            .filter(|m| manifest.has_modality(*m))
            .collect();
        for modality in modalities {
            for label in [Label::Tear, Label::NoTear] {
                if !stratum_sizes.contains_key(&(label, modality)) {
                    return Err(SplitError::EmptyStratum { label, modality });
                }
            }
        }
    }

    let mut need: BTreeMap<Stratum, [i64; 3]> = stratum_sizes
        .iter()
        .map(|(k, &n)| (*k, apportion(n, fractions).map(|c| c as i64)))
        .collect();

    // Patient groups, in a seed-determined order with multi-study patients
    // placed first so single-study patients can absorb any imbalance.
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        groups.entry(rec.patient_id.as_str()).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    let mut rng = rng_from(seed, &[b"stratified_split"]);
    groups.shuffle(&mut rng);
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));

    let mut out = manifest.clone();
    for group in &groups {
        let mut score = [0i64; 3];
        for &i in group {
            let rec = &manifest.records[i];
            let n = need[&(rec.label, rec.modality)];
            for s in 0..3 {
                score[s] += n[s];
            }
        }
        let mut best = 0;
        for s in 1..3 {
            if score[s] > score[best] {
                best = s;
            }
        }
        let split = Split::ASSIGNED[best];
        for &i in group {
            let rec = &manifest.records[i];
            need.get_mut(&(rec.label, rec.modality)).expect("stratum exists")[best] -= 1;
            out.records[i].split = split;
        }
    }
    Ok(out)
}

/// Per-stratum `[train, val, test]` counts; unassigned studies are ignored.
pub fn split_counts(manifest: &DatasetManifest) -> BTreeMap<Stratum, [usize; 3]> {
    let mut counts: BTreeMap<Stratum, [usize; 3]> = BTreeMap::new();
    for rec in &manifest.records {
        if rec.split != Split::Unassigned {
            counts.entry((rec.label, rec.modality)).or_default()[split_index(rec.split)] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::tests::record;
    use crate::data::manifest::StudyRecord;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn cohort(strata: &[(Label, Modality, usize)]) -> DatasetManifest {
        let mut records = Vec::new();
        for &(label, modality, n) in strata {
            for _ in 0..n {
                let id = format!("S{:04}", records.len());
                let patient = format!("P{:04}", records.len());
                records.push(record(&id, &patient, label, modality));
            }
        }
        DatasetManifest::new(records).unwrap()
    }

    fn totals(m: &DatasetManifest) -> ([usize; 3], [usize; 3]) {
        let mut all = [0; 3];
        let mut pos = [0; 3];
        for r in &m.records {
            let i = split_index(r.split);
            all[i] += 1;
            if r.label.is_positive() {
                pos[i] += 1;
            }
        }
        (all, pos)
    }

    #[test]
    fn largest_remainder_matches_hand_counts() {
        let f = SplitFractions::default();
        assert_eq!(apportion(80, &f), [56, 8, 16]);
        assert_eq!(apportion(171, &f), [120, 17, 34]);
        assert_eq!(apportion(29, &f), [20, 3, 6]);
        assert_eq!(apportion(306, &f), [214, 31, 61]);
        assert_eq!(
            apportion(
                10,
                &SplitFractions {
                    train: 0.8,
                    val: 0.1,
                    test: 0.1
                }
            ),
            [8, 1, 1]
        );
        // 1/3 each: remainder ties broken toward train.
        let thirds = SplitFractions {
            train: 1.0 / 3.0,
            val: 1.0 / 3.0,
            test: 1.0 / 3.0,
        };
        assert_eq!(apportion(4, &thirds), [2, 1, 1]);
    }

    #[test]
    fn reproduces_published_cohort_split() {
        // 251 arthrograms (80 tears) and 335 standard MRIs (29 tears).
        let m = cohort(&[
            (Label::Tear, Modality::Arthrogram, 80),
            (Label::NoTear, Modality::Arthrogram, 171),
            (Label::Tear, Modality::Standard, 29),
            (Label::NoTear, Modality::Standard, 306),
        ]);
        let out = stratified_split(&m, &SplitFractions::default(), 11, StratifyMode::Strict).unwrap();
        let (all, pos) = totals(&out);
        assert_eq!(all, [410, 59, 117]);
        assert_eq!(pos, [76, 11, 22]);
        let pct = |p: usize, n: usize| (1000.0 * p as f64 / n as f64).round() / 10.0;
        assert_eq!(pct(pos[0], all[0]), 18.5);
        assert_eq!(pct(pos[1], all[1]), 18.6);
        assert_eq!(pct(pos[2], all[2]), 18.8);
    }

    #[test]
    fn strict_mode_names_the_empty_stratum() {
        let m = cohort(&[(Label::NoTear, Modality::Standard, 10)]);
        let f = SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        };
        assert_eq!(
            stratified_split(&m, &f, 1, StratifyMode::Strict),
            Err(SplitError::EmptyStratum {
                label: Label::Tear,
                modality: Modality::Standard
            })
        );
        let out = stratified_split(&m, &f, 1, StratifyMode::SingleClass).unwrap();
        assert_eq!(totals(&out).0, [8, 1, 1]);
    }

    #[test]
    fn rejects_bad_fractions() {
        let m = cohort(&[(Label::NoTear, Modality::Standard, 3)]);
        for f in [
            SplitFractions {
                train: 0.7,
                val: 0.1,
                test: 0.1,
            },
            SplitFractions {
                train: 1.0,
                val: 0.0,
                test: 0.0,
            },
            SplitFractions {
                train: 1.2,
                val: -0.1,
                test: -0.1,
            },
        ] {
            assert!(matches!(
                stratified_split(&m, &f, 0, StratifyMode::SingleClass),
                Err(SplitError::InvalidFractions { .. })
            ));
        }
    }

    #[test]
    fn same_seed_same_assignment() {
        let m = cohort(&[
            (Label::Tear, Modality::Standard, 13),
            (Label::NoTear, Modality::Standard, 40),
        ]);
        let f = SplitFractions::default();
        let a = stratified_split(&m, &f, 5, StratifyMode::Strict).unwrap();
        let b = stratified_split(&m, &f, 5, StratifyMode::Strict).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&m, &f, 6, StratifyMode::Strict).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bilateral_patients_stay_together() {
        let mut records: Vec<StudyRecord> = Vec::new();
        for i in 0..60 {
            let label = if i % 3 == 0 { Label::Tear } else { Label::NoTear };
            let modality = if i % 2 == 0 {
                Modality::Standard
            } else {
                Modality::Arthrogram
            };
            // The first 15 patients each have two studies (both shoulders).
            let patient = if i < 30 { format!("P{}", i / 2) } else { format!("Q{i}") };
            records.push(record(&format!("S{i}"), &patient, label, modality));
        }
        let m = DatasetManifest::new(records).unwrap();
        let out = stratified_split(&m, &SplitFractions::default(), 3, StratifyMode::Strict).unwrap();
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for r in &out.records {
            let prev = seen.insert(&r.patient_id, r.split);
            assert!(
                prev.is_none() || prev == Some(r.split),
                "patient {} leaked",
                r.patient_id
            );
        }
    }

    proptest! {
        #[test]
        fn split_is_a_stratified_partition(
            sizes in proptest::collection::vec(1usize..40, 4),
            seed in any::<u64>(),
            train in 0.2f64..0.8,
            val_share in 0.1f64..0.9,
        ) {
            let rest = 1.0 - train;
            let f = SplitFractions { train, val: rest * val_share, test: 1.0 - train - rest * val_share };
            let m = cohort(&[
                (Label::Tear, Modality::Standard, sizes[0]),
                (Label::NoTear, Modality::Standard, sizes[1]),
                (Label::Tear, Modality::Arthrogram, sizes[2]),
                (Label::NoTear, Modality::Arthrogram, sizes[3]),
            ]);
            let out = stratified_split(&m, &f, seed, StratifyMode::Strict).unwrap();
            prop_assert_eq!(out.len(), m.len());
            prop_assert!(out.records.iter().all(|r| r.split != Split::Unassigned));
            for (stratum, counts) in split_counts(&out) {
                let n: usize = counts.iter().sum();
                for (c, want) in counts.iter().zip(f.as_array()) {
                    let observed = *c as f64 / n as f64;
                    prop_assert!(
                        (observed - want).abs() <= 1.0 / n as f64 + 1e-12,
                        "stratum {:?}: {:?} vs {}", stratum, counts, want
                    );
                }
            }
        }
    }
}
