use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{io_err, require, volume_index, write_text, Context, PipelineError};
use crate::calibration::{
    calibrate_threshold, ensemble_by_study, prediction_rows, read_predictions_csv, write_predictions_csv,
    CalibratedThreshold, EnsemblePrediction,
};
use crate::data::{read_volume, stratified_split, write_volume, DatasetManifest, Label, Modality, Split, View};
use crate::metrics::{chi_squared_test, evaluate_with_curves, render_roc_svg, write_roc_csv, EvalReport};
use crate::model::{load_model, EncoderConfig, ScanClassifier, ScanPrediction};
use crate::preprocess::{augment_copy, fit_intensity_stats, IntensityStats, Preprocessor};
use crate::synth::{generate_phantoms, MANIFEST_FILE, PROVENANCE_FILE};
use crate::training::{run_staged_training, AugmentedFile, StageData, TrainConfig, TrainLog};
use crate::util::{derive_seed, to_canonical_json};

fn read_manifest(path: &Path, producer: &'static str) -> Result<DatasetManifest, PipelineError> {
    require(path, producer)?;
    Ok(DatasetManifest::read_csv(path)?)
}

fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), PipelineError> {
    write_text(path, &manifest.to_csv_string()?)
}

/// Seed of one `(modality, view)` model derived from a component seed.
fn model_seed(seed: u64, modality: Modality, view: View) -> u64 {
    derive_seed(seed, &[modality.as_str().as_bytes(), view.as_str().as_bytes()])
}

/// Writes a phantom dataset to `synth/`.
pub fn synth(ctx: &Context) -> Result<DatasetManifest, PipelineError> {
    let cfg = ctx
        .config
        .synth
        .as_ref()
        .ok_or_else(|| PipelineError::Config("`synth` needs a `synth` config section".into()))?;
    let dir = ctx.layout.synth_dir();
    let manifest = generate_phantoms(cfg, &dir)?;
    let (index, _) = volume_index(&manifest, &dir)?;
    let index_path = dir.join("volumes.sha256");
    write_text(&index_path, &index)?;
    let mut rec = ctx.recorder("synth", None);
    for p in [dir.join(MANIFEST_FILE), dir.join(PROVENANCE_FILE), index_path] {
        rec.output(&p)?;
    }
    rec.finish()?;
    Ok(manifest)
}

/// Patient-grouped stratified split of the raw manifest.
pub fn split(ctx: &Context) -> Result<DatasetManifest, PipelineError> {
    let src = ctx.layout.data_root().join(MANIFEST_FILE);
    let manifest = read_manifest(&src, "synth")?;
    let cfg = &ctx.config.split;
    let out = stratified_split(&manifest, &cfg.fractions, ctx.config.split_seed(), cfg.stratify)?;
    let path = ctx.layout.split_manifest();
    write_manifest(&out, &path)?;
    let mut rec = ctx.recorder("split", None);
    rec.input(&src)?;
    rec.output(&path)?;
    rec.finish()?;
    Ok(out)
}

/// Intensity statistics from training-split volumes only.
pub fn fit_stats(ctx: &Context) -> Result<IntensityStats, PipelineError> {
    let split_path = ctx.layout.split_manifest();
    let manifest = read_manifest(&split_path, "split")?;
    let root = ctx.layout.data_root();
    let stats = fit_intensity_stats(&manifest, &root)?;
    let path = ctx.layout.stats();
    write_text(&path, &stats.to_json()?)?;
    let train_only = DatasetManifest {
        records: manifest.in_split(Split::Train).cloned().collect(),
        ..manifest.clone()
    };
    let mut rec = ctx.recorder("fit-stats", None);
    rec.input(&split_path)?;
    rec.input_volumes(&train_only, &root)?;
    rec.output(&path)?;
    rec.finish()?;
    Ok(stats)
}

/// Resized, cropped and normalized copies of every series under
/// `preprocessed/volumes/<study>/`, plus augmented training copies under
/// `preprocessed/augmented/<study>/` when augmentation is configured.
fn put_volume(scan: &crate::data::VolumeScan, path: &Path) -> Result<(), PipelineError> {
    let parent = path.parent().expect("volume paths sit in a directory");
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    Ok(write_volume(scan, path)?)
}

pub fn preprocess(ctx: &Context) -> Result<DatasetManifest, PipelineError> {
    let split_path = ctx.layout.split_manifest();
    let manifest = read_manifest(&split_path, "split")?;
    let stats_path = ctx.layout.stats();
    require(&stats_path, "fit-stats")?;
    let stats = IntensityStats::from_json(&fs::read_to_string(&stats_path).map_err(io_err(&stats_path))?)?;
    let pre = Preprocessor::new(stats);
    let raw_root = ctx.layout.data_root();
    let dir = ctx.layout.preprocessed_dir();
    let augmentation = ctx.config.augmentation.as_ref().filter(|a| a.copies_per_scan > 0);

    let mut out = manifest.clone();
    let mut augmented = Vec::new();
    for rec in &mut out.records {
        let mut used = BTreeSet::new();
        for series in &mut rec.series {
            let file = series
                .path
                .file_name()
                .ok_or_else(|| {
                    PipelineError::Config(format!("series path {} has no file name", series.path.display()))
                })?
                .to_owned();
            let rel = PathBuf::from("volumes").join(&rec.study_id).join(&file);
            if !used.insert(rel.clone()) {
                return Err(PipelineError::Config(format!(
                    "study `{}` has two series named {}",
                    rec.study_id,
                    file.to_string_lossy()
                )));
            }
            let scan = pre.apply(&read_volume(DatasetManifest::resolve(&raw_root, series))?)?;
            put_volume(&scan, &dir.join(&rel))?;
            if let Some(cfg) =
                augmentation.filter(|a| rec.split == Split::Train && a.applies_to(rec.label.is_positive()))
            {
                let stem = rel.file_stem().expect("has a file name").to_string_lossy().into_owned();
                for copy in 0..cfg.copies_per_scan {
                    let path = PathBuf::from("augmented")
                        .join(&rec.study_id)
                        .join(format!("{stem}-aug{copy}.mvol"));
                    put_volume(&augment_copy(&scan, cfg, copy)?, &dir.join(&path))?;
                    augmented.push(AugmentedFile {
                        study_id: rec.study_id.clone(),
                        view: series.view,
                        source: rel.clone(),
                        copy,
                        path,
                    });
                }
            }
            series.path = rel;
        }
    }
    let manifest_path = ctx.layout.preprocessed_manifest();
    write_manifest(&out, &manifest_path)?;
    let aug_path = ctx.layout.augmented_index();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["study_id", "view", "source", "copy", "path"])
        .map_err(csv_err(&aug_path))?;
    for a in &augmented {
        w.serialize(a).map_err(csv_err(&aug_path))?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Config(e.to_string()))?;
    write_text(&aug_path, &String::from_utf8(bytes).expect("CSV of UTF-8 fields"))?;

    let (mut index, _) = volume_index(&out, &dir)?;
    for a in &augmented {
        let h = crate::util::sha256_file(dir.join(&a.path)).map_err(io_err(&a.path))?;
        index += &format!("{h}  {}\n", a.path.to_string_lossy().replace('\\', "/"));
    }
    let index_path = dir.join("volumes.sha256");
    write_text(&index_path, &index)?;

    let mut rec = ctx.recorder("preprocess", None);
    rec.input(&split_path)?;
    rec.input(&stats_path)?;
    rec.input_volumes(&manifest, &raw_root)?;
    for p in [&manifest_path, &aug_path, &index_path] {
        rec.output(p)?;
    }
    rec.finish()?;
    Ok(out)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn read_augmented(path: &Path) -> Result<Vec<AugmentedFile>, PipelineError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let rows: Result<Vec<AugmentedFile>, _> = r.deserialize().collect();
    rows.map_err(csv_err(path))
}

/// Encoder configuration of one `(modality, view)` model.
fn model_config(ctx: &Context, modality: Modality, view: View) -> EncoderConfig {
    EncoderConfig {
        init_seed: model_seed(ctx.config.encoder.init_seed, modality, view),
        ..ctx.config.encoder.clone()
    }
}

/// One model per configured view on the `modality` studies, optionally
/// after pretraining on the auxiliary dataset.
pub fn train(ctx: &Context) -> Result<Vec<(View, Vec<TrainLog>)>, PipelineError> {
    let modality = ctx.require_modality()?;
    let manifest_path = ctx.layout.preprocessed_manifest();
    let manifest = read_manifest(&manifest_path, "preprocess")?;
    let aug_path = ctx.layout.augmented_index();
    let augmented = read_augmented(&aug_path)?;
    let root = ctx.layout.preprocessed_dir();

    let pretrain = match &ctx.config.pretrain {
        Some(p) => {
            let m = DatasetManifest::read_csv(&p.manifest)?;
            let stats = fit_intensity_stats(&m, &p.data_root)?;
            Some((p, m, Arc::new(Preprocessor::new(stats))))
        }
        None => None,
    };

    let mut rec = ctx.recorder("train", Some(modality));
    rec.input(&manifest_path)?;
    rec.input(&root.join("volumes.sha256"))?;
    if aug_path.exists() {
        rec.input(&aug_path)?;
    }
    if let Some((p, m, _)) = &pretrain {
        rec.input(&p.manifest)?;
        rec.input_volumes(m, &p.data_root)?;
    }

    let mut logs = Vec::new();
    for &view in &ctx.config.views {
        let fine_stage = StageData {
            manifest: &manifest,
            root: &root,
            view,
            preprocessor: None,
            augmentation: None,
            augmented_files: &augmented,
        };
        let fine_cfg = TrainConfig {
            seed: model_seed(ctx.config.train.seed, modality, view),
            ..ctx.config.train.clone()
        };
        let pre_cfg;
        let pre_stage = match &pretrain {
            Some((p, m, prep)) => {
                pre_cfg = TrainConfig {
                    seed: model_seed(p.train.seed, modality, view),
                    ..p.train.clone()
                };
                Some((
                    StageData {
                        manifest: m,
                        root: &p.data_root,
                        view,
                        preprocessor: Some(prep.clone()),
                        augmentation: None,
                        augmented_files: &[],
                    },
                    &pre_cfg,
                ))
            }
            None => None,
        };
        let dir = ctx.layout.model_dir(modality, view);
        log::info!("training {modality} {view} model");
        let (_, view_logs) = run_staged_training(
            model_config(ctx, modality, view),
            pre_stage,
            (fine_stage, &fine_cfg),
            modality,
            Some(&dir),
        )?;
        for stage_dir in ["pretrain", "finetune"] {
            for f in ["selected.ckpt", "train_log.jsonl"] {
                let p = dir.join(stage_dir).join(f);
                if p.exists() && (stage_dir == "finetune" || pretrain.is_some()) {
                    rec.output(&p)?;
                }
            }
        }
        logs.push((view, view_logs));
    }
    rec.finish()?;
    Ok(logs)
}

fn load_models(ctx: &Context, modality: Modality) -> Result<Vec<(View, PathBuf, ScanClassifier)>, PipelineError> {
    let mut models = Vec::new();
    for &view in &ctx.config.views {
        let path = ctx.layout.model(modality, view);
        require(&path, "train")?;
        let model = load_model(&path, &model_config(ctx, modality, view))?;
        models.push((view, path, model));
    }
    Ok(models)
}

/// Per-series probabilities for the validation and test studies of the
/// modality, written to `predictions/<modality>/{val,test}.csv`.
pub fn predict(ctx: &Context) -> Result<(Vec<ScanPrediction>, Vec<ScanPrediction>), PipelineError> {
    let modality = ctx.require_modality()?;
    let models = load_models(ctx, modality)?;
    let manifest_path = ctx.layout.preprocessed_manifest();
    let manifest = read_manifest(&manifest_path, "preprocess")?.filter_modality(modality);
    let root = ctx.layout.preprocessed_dir();
    let mut rec = ctx.recorder("predict", Some(modality));
    rec.input(&manifest_path)?;
    rec.input(&root.join("volumes.sha256"))?;
    for (_, path, _) in &models {
        rec.input(path)?;
    }

    let mut per_split = Vec::new();
    for (split, name) in [(Split::Val, "val"), (Split::Test, "test")] {
        let mut preds = Vec::new();
        for study in manifest.in_split(split) {
            for (view, _, model) in &models {
                for series in study.series_of(*view) {
                    let scan = read_volume(DatasetManifest::resolve(&root, series))?;
                    preds.push(model.predict_scan(&scan)?);
                }
            }
        }
        let rows = prediction_rows(&preds, None)?;
        let path = ctx.layout.predictions(modality, name);
        let mut buf = Vec::new();
        write_predictions_csv(&rows, &mut buf)?;
        write_text(&path, &String::from_utf8(buf).expect("CSV of UTF-8 fields"))?;
        rec.output(&path)?;
        per_split.push(preds);
    }
    rec.finish()?;
    let test = per_split.pop().expect("two splits");
    let val = per_split.pop().expect("two splits");
    Ok((val, test))
}

pub fn read_predictions(path: &Path) -> Result<Vec<ScanPrediction>, PipelineError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    Ok(read_predictions_csv(f)?.iter().map(|r| r.scan_prediction()).collect())
}

/// Study-level ensembles of a predictions file paired with their labels.
fn labelled_ensembles(
    path: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<(EnsemblePrediction, Label)>, PipelineError> {
    ensemble_by_study(&read_predictions(path)?)?
        .into_iter()
        .map(|e| {
            let label = manifest
                .get(&e.study_id)
                .ok_or_else(|| {
                    PipelineError::Config(format!("predicted study `{}` is not in the manifest", e.study_id))
                })?
                .label;
            Ok((e, label))
        })
        .collect()
}

/// Threshold equalizing sensitivity and specificity on validation studies.
pub fn calibrate(ctx: &Context) -> Result<CalibratedThreshold, PipelineError> {
    let modality = ctx.require_modality()?;
    for &view in &ctx.config.views {
        require(&ctx.layout.model(modality, view), "train")?;
    }
    let val_path = ctx.layout.predictions(modality, "val");
    require(&val_path, "predict")?;
    let manifest_path = ctx.layout.preprocessed_manifest();
    let manifest = read_manifest(&manifest_path, "preprocess")?;
    let pairs = labelled_ensembles(&val_path, &manifest)?;
    let mut threshold = calibrate_threshold(&pairs, modality)?;
    threshold.calibrated_on = Some("val".into());
    let path = ctx.layout.threshold(modality);
    write_text(&path, &threshold.to_json()?)?;
    let mut rec = ctx.recorder("calibrate", Some(modality));
    rec.input(&manifest_path)?;
    rec.input(&val_path)?;
    rec.output(&path)?;
    rec.finish()?;
    Ok(threshold)
}

/// Test-set report, ROC curves and thresholded decisions.
pub fn evaluate(ctx: &Context) -> Result<EvalReport, PipelineError> {
    let modality = ctx.require_modality()?;
    let thr_path = ctx.layout.threshold(modality);
    require(&thr_path, "calibrate")?;
    let test_path = ctx.layout.predictions(modality, "test");
    require(&test_path, "predict")?;
    let threshold = CalibratedThreshold::read_json(&thr_path)?;
    let manifest_path = ctx.layout.preprocessed_manifest();
    let manifest = read_manifest(&manifest_path, "preprocess")?;
    let pairs = labelled_ensembles(&test_path, &manifest)?;
    let seed = derive_seed(ctx.config.evaluation.bootstrap_seed, &[modality.as_str().as_bytes()]);
    let (report, curves) = evaluate_with_curves(&pairs, &threshold, ctx.config.evaluation.bootstrap_iterations, seed)?;

    let dir = ctx.layout.evaluation_dir(modality);
    let mut rec = ctx.recorder("evaluate", Some(modality));
    rec.input(&manifest_path)?;
    rec.input(&thr_path)?;
    rec.input(&test_path)?;
    let report_path = ctx.layout.eval_report(modality);
    write_text(&report_path, &report.to_json()?)?;
    rec.output(&report_path)?;
    for c in &curves {
        let mut buf = Vec::new();
        write_roc_csv(&c.points, &mut buf)?;
        let p = dir.join(format!("roc_{}.csv", c.name));
        write_text(&p, &String::from_utf8(buf).expect("CSV of UTF-8 fields"))?;
        rec.output(&p)?;
    }
    let svg_path = dir.join("roc.svg");
    write_text(
        &svg_path,
        &render_roc_svg(&curves, &format!("ROC, {modality} test set"))?,
    )?;
    rec.output(&svg_path)?;
    let rows = prediction_rows(&read_predictions(&test_path)?, Some(&threshold))?;
    let mut buf = Vec::new();
    write_predictions_csv(&rows, &mut buf)?;
    let decisions = dir.join("test_decisions.csv");
    write_text(&decisions, &String::from_utf8(buf).expect("CSV of UTF-8 fields"))?;
    rec.output(&decisions)?;
    rec.finish()?;
    Ok(report)
}

/// `(statistic, p_value)` of a chi-squared test, absent when the table
/// has an empty row or column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquared {
    pub statistic: f64,
    pub p_value: f64,
}

/// Study counts and label-balance tests of the split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub studies: BTreeMap<Split, BTreeMap<Modality, BTreeMap<Label, usize>>>,
    /// Label distribution, training vs test split, per modality.
    pub train_vs_test: BTreeMap<Modality, Option<ChiSquared>>,
    /// Label distribution, standard vs arthrogram over all studies.
    pub standard_vs_arthrogram: Option<ChiSquared>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub cohort: CohortSummary,
    pub evaluations: BTreeMap<Modality, EvalReport>,
}

fn chi(table: [[u64; 2]; 2]) -> Option<ChiSquared> {
    chi_squared_test(table)
        .ok()
        .map(|(statistic, p_value)| ChiSquared { statistic, p_value })
}

fn cohort(manifest: &DatasetManifest) -> CohortSummary {
    let mut studies: BTreeMap<Split, BTreeMap<Modality, BTreeMap<Label, usize>>> = BTreeMap::new();
    for r in &manifest.records {
        *studies
            .entry(r.split)
            .or_default()
            .entry(r.modality)
            .or_default()
            .entry(r.label)
            .or_default() += 1;
    }
    let count = |split: Option<Split>, modality: Modality, label: Label| -> u64 {
        manifest
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s) && r.modality == modality && r.label == label)
            .count() as u64
    };
    let row = |split: Option<Split>, m: Modality| [count(split, m, Label::Tear), count(split, m, Label::NoTear)];
    let present: Vec<Modality> = Modality::ALL
        .iter()
        .copied()
        .filter(|&m| manifest.has_modality(m))
        .collect();
    let train_vs_test = present
        .iter()
        .map(|&m| (m, chi([row(Some(Split::Train), m), row(Some(Split::Test), m)])))
        .collect();
    let standard_vs_arthrogram = if present.len() == 2 {
        chi([row(None, Modality::Standard), row(None, Modality::Arthrogram)])
    } else {
        None
    };
    CohortSummary {
        studies,
        train_vs_test,
        standard_vs_arthrogram,
    }
}

/// Cohort table and every available evaluation in `report/summary.json`.
pub fn report(ctx: &Context) -> Result<ReportSummary, PipelineError> {
    let split_path = ctx.layout.split_manifest();
    let manifest = read_manifest(&split_path, "split")?;
    let mut rec = ctx.recorder("report", None);
    rec.input(&split_path)?;
    let mut evaluations = BTreeMap::new();
    for &m in Modality::ALL {
        let p = ctx.layout.eval_report(m);
        if p.exists() {
            let r: EvalReport = serde_json::from_str(&fs::read_to_string(&p).map_err(io_err(&p))?)?;
            rec.input(&p)?;
            evaluations.insert(m, r);
        }
    }
    if evaluations.is_empty() {
        let m = ctx.modality.unwrap_or(Modality::Standard);
        return Err(PipelineError::MissingPrerequisite {
            artifact: ctx.layout.eval_report(m),
            subcommand: "evaluate",
        });
    }
    let summary = ReportSummary {
        cohort: cohort(&manifest),
        evaluations,
    };
    let path = ctx.layout.summary();
    write_text(&path, &to_canonical_json(&summary)?)?;
    rec.output(&path)?;
    rec.finish()?;
    Ok(summary)
}
