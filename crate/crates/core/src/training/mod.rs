//! Class-weighted BCE training with Adam, early stopping on validation
//! accuracy and best-epoch selection, plus pretrain -> finetune staging.

mod examples;
mod loss;
mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetManifest, Modality, Split, View, VolumeError, VolumeScan};
use crate::model::layers::Parameters;
use crate::model::{save_model, EncoderConfig, ModelError, ScanClassifier};
use crate::preprocess::{AugmentationConfig, PreprocessError, Preprocessor};
use crate::util::rng_from;

pub use examples::{examples_for_view, with_augmentation, with_augmented_files, AugmentedFile, Example, ScanSource};
pub use loss::{softplus, weighted_bce, weighted_bce_logit};
pub use optim::Adam;

/// Decision threshold for validation accuracy during training.
pub const VALIDATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set needs both classes, found {positives} positive and {negatives} negative")]
    ClassImbalance { positives: usize, negatives: usize },
    #[error("no data: {0}")]
    EmptyData(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosWeightMode {
    /// `N_negative / N_positive` over the training examples.
    #[default]
    AutoInverseFrequency,
    Manual,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    #[default]
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    /// Scans whose gradients are averaged per optimizer step.
    pub batch_scans: usize,
    pub pos_weight_mode: PosWeightMode,
    pub pos_weight: Option<f64>,
    pub seed: u64,
    pub stage: Stage,
    /// Write a checkpoint at every improving epoch, not only the selected one.
    pub checkpoint_improvements: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 10,
            learning_rate: 1e-5,
            batch_scans: 8,
            pos_weight_mode: PosWeightMode::AutoInverseFrequency,
            pos_weight: None,
            seed: 0,
            stage: Stage::Finetune,
            checkpoint_improvements: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::InvalidConfig(m.to_string()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be finite and > 0");
        }
        if self.batch_scans == 0 {
            return bad("batch_scans must be >= 1");
        }
        match (self.pos_weight_mode, self.pos_weight) {
            (PosWeightMode::Manual, Some(w)) if w.is_finite() && w > 0.0 => Ok(()),
            (PosWeightMode::Manual, _) => bad("manual pos_weight must be given, finite and > 0"),
            (PosWeightMode::AutoInverseFrequency, _) => Ok(()),
        }
    }
}

fn inverse_frequency(positives: usize, negatives: usize) -> Result<f64, TrainingError> {
    if positives == 0 || negatives == 0 {
        return Err(TrainingError::ClassImbalance { positives, negatives });
    }
    Ok(negatives as f64 / positives as f64)
}

/// `N_negative / N_positive` over training-split studies of `modality`.
pub fn compute_pos_weight(manifest: &DatasetManifest, modality: Modality) -> Result<f64, TrainingError> {
    let (mut pos, mut neg) = (0, 0);
    for r in manifest.in_split(Split::Train).filter(|r| r.modality == modality) {
        if r.label.is_positive() {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    inverse_frequency(pos, neg)
}

/// Patience-based stopping on a maximized metric; ties keep the earlier epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None }
    }

    /// Records the metric of 1-based `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        let improved = match self.best {
            None => true,
            Some((_, best)) => metric > best,
        };
        if improved {
            self.best = Some((epoch, metric));
        }
        let best_epoch = self.best.map_or(epoch, |b| b.0);
        (improved, epoch - best_epoch >= self.patience)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Stage,
    pub pos_weight: f64,
    pub train_examples: usize,
    pub val_examples: usize,
    /// Training examples (including augmented copies) per modality.
    pub train_examples_by_modality: BTreeMap<Modality, usize>,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub stopped_epoch: usize,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine<'a> {
    Epoch(&'a EpochRecord),
    Summary {
        stage: Stage,
        pos_weight: f64,
        train_examples: usize,
        val_examples: usize,
        train_examples_by_modality: &'a BTreeMap<Modality, usize>,
        selected_epoch: usize,
        stopped_epoch: usize,
        selected_val_accuracy: f64,
    },
}

impl TrainLog {
    /// One JSON object per epoch followed by a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out += &serde_json::to_string(&LogLine::Epoch(e)).expect("serializable");
            out.push('\n');
        }
        let summary = LogLine::Summary {
            stage: self.stage,
            pos_weight: self.pos_weight,
            train_examples: self.train_examples,
            val_examples: self.val_examples,
            train_examples_by_modality: &self.train_examples_by_modality,
            selected_epoch: self.selected_epoch,
            stopped_epoch: self.stopped_epoch,
            selected_val_accuracy: self.epochs[self.selected_epoch - 1].val_accuracy,
        };
        out += &serde_json::to_string(&summary).expect("serializable");
        out.push('\n');
        out
    }
}

/// Mean weighted BCE over `scans` and its gradient with respect to every
/// model parameter.
pub fn mean_loss_and_gradient(
    model: &ScanClassifier,
    scans: &[(VolumeScan, bool)],
    pos_weight: f64,
) -> Result<(f64, ScanClassifier), TrainingError> {
    loss::check_pos_weight(pos_weight)?;
    if scans.is_empty() {
        return Err(TrainingError::EmptyData("no scans".into()));
    }
    let n = scans.len() as f64;
    let mut grad = model.zeros_like();
    let mut total = 0.0;
    for (scan, positive) in scans {
        let fwd = model.forward_scan(scan)?;
        let (loss, d_logit) = weighted_bce_logit(fwd.logit, *positive, pos_weight);
        total += loss;
        model.backward_scan(&fwd, d_logit / n, &mut grad);
    }
    Ok((total / n, grad))
}

struct Evaluation {
    accuracy: f64,
    loss: f64,
}

fn evaluate(model: &ScanClassifier, examples: &[Example], pos_weight: f64) -> Result<Evaluation, TrainingError> {
    let (mut correct, mut loss) = (0usize, 0.0);
    for ex in examples {
        let fwd = model.forward_scan(&ex.load()?)?;
        if (fwd.probability >= VALIDATION_THRESHOLD) == ex.is_positive() {
            correct += 1;
        }
        loss += weighted_bce_logit(fwd.logit, ex.is_positive(), pos_weight).0;
    }
    let n = examples.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

fn provenance(cfg: &TrainConfig, epoch: usize, val_accuracy: f64, pos_weight: f64) -> serde_json::Value {
    serde_json::json!({
        "stage": cfg.stage,
        "epoch": epoch,
        "val_accuracy": val_accuracy,
        "pos_weight": pos_weight,
        "seed": cfg.seed,
        "learning_rate": cfg.learning_rate,
    })
}

/// Trains `model` and returns it with the parameters of the selected epoch.
///
/// When `out_dir` is given it receives `train_log.jsonl`, `selected.ckpt`
/// and, if configured, `epoch-NNN.ckpt` for every improving epoch.
pub fn train(
    mut model: ScanClassifier,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ScanClassifier, TrainLog), TrainingError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainingError::EmptyData("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(TrainingError::EmptyData("validation set is empty".into()));
    }
    let positives = train_set.iter().filter(|e| e.is_positive()).count();
    let pos_weight = match cfg.pos_weight_mode {
        PosWeightMode::Manual => cfg.pos_weight.expect("validated"),
        PosWeightMode::AutoInverseFrequency => inverse_frequency(positives, train_set.len() - positives)?,
    };
    let mut by_modality = BTreeMap::new();
    for e in train_set {
        *by_modality.entry(e.modality).or_insert(0) += 1;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    log::info!(
        "{:?}: {} training / {} validation scans, pos_weight {pos_weight:.4}",
        cfg.stage,
        train_set.len(),
        val_set.len()
    );

    let mut optimizer = Adam::new(cfg.learning_rate, model.num_parameters());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = rng_from(cfg.seed, &[b"epoch", &(epoch as u64).to_le_bytes()]);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_scans) {
            let mut grad = model.zeros_like();
            for &i in batch {
                let ex = &train_set[i];
                let fwd = model.forward_scan(&ex.load()?)?;
                let (loss, d_logit) = weighted_bce_logit(fwd.logit, ex.is_positive(), pos_weight);
                epoch_loss += loss;
                model.backward_scan(&fwd, d_logit / batch.len() as f64, &mut grad);
            }
            optimizer.step(&mut model, &grad);
        }

        let val = evaluate(&model, val_set, pos_weight)?;
        let (improved, stop) = stopper.observe(epoch, val.accuracy);
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_accuracy: val.accuracy,
            val_loss: val.loss,
            improved,
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, val accuracy {:.4}, val loss {:.5}{}",
            record.train_loss,
            record.val_accuracy,
            record.val_loss,
            if improved { " *" } else { "" }
        );
        if improved {
            best = model.clone();
            if let (Some(dir), true) = (out_dir, cfg.checkpoint_improvements) {
                save_model(
                    &dir.join(format!("epoch-{epoch:03}.ckpt")),
                    &model,
                    &provenance(cfg, epoch, val.accuracy, pos_weight),
                )?;
            }
        }
        records.push(record);
        if stop {
            break;
        }
    }

    let log = TrainLog {
        stage: cfg.stage,
        pos_weight,
        train_examples: train_set.len(),
        val_examples: val_set.len(),
        train_examples_by_modality: by_modality,
        selected_epoch: stopper.best_epoch().expect("at least one epoch ran"),
        stopped_epoch: records.len(),
        epochs: records,
    };
    if let Some(dir) = out_dir {
        let sel = log.selected_epoch;
        save_model(
            &dir.join("selected.ckpt"),
            &best,
            &provenance(cfg, sel, log.epochs[sel - 1].val_accuracy, pos_weight),
        )?;
        let mut f = fs::File::create(dir.join("train_log.jsonl"))?;
        f.write_all(log.to_jsonl().as_bytes())?;
    }
    Ok((best, log))
}

/// Where one training stage finds its scans.
#[derive(Debug, Clone)]
pub struct StageData<'a> {
    pub manifest: &'a DatasetManifest,
    pub root: &'a Path,
    pub view: View,
    pub preprocessor: Option<Arc<Preprocessor>>,
    /// Copies generated while loading.
    pub augmentation: Option<AugmentationConfig>,
    /// Copies already on disk under `root`.
    pub augmented_files: &'a [AugmentedFile],
}

impl StageData<'_> {
    fn examples(&self, manifest: &DatasetManifest) -> Result<(Vec<Example>, Vec<Example>), TrainingError> {
        let train = examples_for_view(manifest, self.root, Split::Train, self.view, self.preprocessor.clone());
        let train = match &self.augmentation {
            Some(cfg) => with_augmentation(train, cfg)?,
            None => train,
        };
        let train = with_augmented_files(train, self.augmented_files, self.root);
        let val = examples_for_view(manifest, self.root, Split::Val, self.view, self.preprocessor.clone());
        Ok((train, val))
    }
}

/// Optional pretraining on an auxiliary labelled manifest, then finetuning
/// on the `modality` studies of the target manifest. Every parameter is
/// trainable in both stages; stage 2 starts from the stage-1 selection.
pub fn run_staged_training(
    encoder: EncoderConfig,
    pretrain: Option<(StageData<'_>, &TrainConfig)>,
    finetune: (StageData<'_>, &TrainConfig),
    modality: Modality,
    out_dir: Option<&Path>,
) -> Result<(ScanClassifier, Vec<TrainLog>), TrainingError> {
    let (fine_data, fine_cfg) = finetune;
    if !fine_data.manifest.has_modality(modality) {
        return Err(TrainingError::EmptyData(format!(
            "finetune manifest has no {modality} studies"
        )));
    }
    let mut model = ScanClassifier::new(encoder)?;
    let mut logs = Vec::new();
    if let Some((data, cfg)) = pretrain {
        let cfg = TrainConfig {
            stage: Stage::Pretrain,
            ..cfg.clone()
        };
        let (train_set, val_set) = data.examples(data.manifest)?;
        let dir = out_dir.map(|d| d.join("pretrain"));
        let (m, log) = train(model, &train_set, &val_set, &cfg, dir.as_deref())?;
        model = m;
        logs.push(log);
    }
    let cfg = TrainConfig {
        stage: Stage::Finetune,
        ..fine_cfg.clone()
    };
    let filtered = fine_data.manifest.filter_modality(modality);
    let (train_set, val_set) = fine_data.examples(&filtered)?;
    let dir = out_dir.map(|d| d.join("finetune"));
    let (model, log) = train(model, &train_set, &val_set, &cfg, dir.as_deref())?;
    logs.push(log);
    Ok((model, logs))
}

#[cfg(test)]
mod tests;
