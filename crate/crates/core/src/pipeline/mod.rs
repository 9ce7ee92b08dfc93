//! Configuration-driven orchestration of the full workflow. Every step reads
//! artifacts of earlier steps from the output root, writes new files beside
//! them and records a run manifest under `runs/`.

mod steps;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::data::{
    DatasetManifest, ManifestError, Modality, SplitError, SplitFractions, StratifyMode, View, VolumeError,
};
use crate::metrics::MetricsError;
use crate::model::{EncoderConfig, ModelError};
use crate::preprocess::{AugmentationConfig, PreprocessError};
use crate::synth::{PhantomConfig, SynthError};
use crate::training::{TrainConfig, TrainingError};
use crate::util::{derive_seed, sha256_file, sha256_hex, to_canonical_json};

pub use steps::{
    calibrate, evaluate, fit_stats, predict, preprocess, read_predictions, report, split, synth, train, CohortSummary,
    ReportSummary,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing {}: run `{subcommand}` first", artifact.display())]
    MissingPrerequisite {
        artifact: PathBuf,
        subcommand: &'static str,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// 1 for invalid configuration, input data or missing prerequisites;
    /// 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        let validation = match self {
            Self::Config(_) | Self::MissingPrerequisite { .. } | Self::Manifest(_) | Self::Split(_) => true,
            Self::Synth(e) => matches!(e, SynthError::Config(_) | SynthError::Manifest(_)),
            Self::Preprocess(e) => matches!(
                e,
                PreprocessError::MissingStats(_) | PreprocessError::InvalidConfig(_) | PreprocessError::NoTrainingData
            ),
            Self::Model(e) => matches!(e, ModelError::InvalidConfig(_)),
            Self::Training(e) => matches!(
                e,
                TrainingError::InvalidConfig(_) | TrainingError::ClassImbalance { .. } | TrainingError::EmptyData(_)
            ),
            Self::Calibration(e) => matches!(e, CalibrationError::SingleClass { .. }),
            Self::Metrics(e) => matches!(e, MetricsError::SingleClass { .. }),
            Self::Volume(_) | Self::Io { .. } | Self::Json(_) => false,
        };
        if validation {
            1
        } else {
            2
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Raw dataset: `manifest.csv` plus the volumes it references.
    /// Defaults to the `synth` output.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
}

fn default_output_root() -> PathBuf {
    PathBuf::from("run")
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            output_root: default_output_root(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default)]
    pub fractions: SplitFractions,
    #[serde(default)]
    pub stratify: StratifyMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: SplitFractions::default(),
            stratify: StratifyMode::Strict,
        }
    }
}

/// An auxiliary labelled dataset trained on before finetuning. Its
/// manifest must carry split assignments; its intensity statistics come
/// from its own training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub manifest: PathBuf,
    pub data_root: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_bootstrap")]
    pub bootstrap_iterations: usize,
    #[serde(default)]
    pub bootstrap_seed: u64,
}

fn default_bootstrap() -> usize {
    1000
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            bootstrap_iterations: default_bootstrap(),
            bootstrap_seed: 0,
        }
    }
}

/// Whole-workflow configuration. Component seeds select sub-streams of the
/// global `seed`: the effective value is derived from both, so changing
/// `seed` alone reseeds every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub synth: Option<PhantomConfig>,
    #[serde(default)]
    pub split: SplitConfig,
    /// Training-split copies written by `preprocess`; none when absent.
    #[serde(default)]
    pub augmentation: Option<AugmentationConfig>,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "all_views")]
    pub views: Vec<View>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Used when a per-modality step gets no `--modality`.
    #[serde(default)]
    pub modality: Option<Modality>,
}

fn all_views() -> Vec<View> {
    View::ALL.to_vec()
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        self.split.fractions.validate()?;
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        self.encoder.validate_shape()?;
        self.train.validate()?;
        if let Some(p) = &self.pretrain {
            p.train.validate()?;
        }
        if self.views.is_empty() {
            return bad("views must name at least one view".into());
        }
        let mut seen = self.views.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.views.len() {
            return bad("views must not repeat".into());
        }
        if self.evaluation.bootstrap_iterations < 2 {
            return bad("evaluation.bootstrap_iterations must be >= 2".into());
        }
        Ok(())
    }

    /// The configuration with every component seed replaced by its
    /// effective value.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        let d = |name: &str, own: u64| derive_seed(self.seed, &[name.as_bytes(), &own.to_le_bytes()]);
        if let Some(s) = &mut c.synth {
            s.seed = d("synth", s.seed);
        }
        if let Some(a) = &mut c.augmentation {
            a.seed = d("augmentation", a.seed);
        }
        c.encoder.init_seed = d("init", c.encoder.init_seed);
        c.train.seed = d("train", c.train.seed);
        if let Some(p) = &mut c.pretrain {
            p.train.seed = d("pretrain", p.train.seed);
        }
        c.evaluation.bootstrap_seed = d("bootstrap", c.evaluation.bootstrap_seed);
        c
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, &[b"split"])
    }
}

/// File locations under one output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
    data_root: Option<PathBuf>,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>, data_root: Option<PathBuf>) -> Self {
        Self {
            root: root.into(),
            data_root,
        }
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.root.join("synth")
    }

    /// Raw dataset root: the configured one, else the `synth` output.
    pub fn data_root(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_else(|| self.synth_dir())
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.root.join("split").join("manifest.csv")
    }

    pub fn stats(&self) -> PathBuf {
        self.root.join("stats").join("intensity_stats.json")
    }

    pub fn preprocessed_dir(&self) -> PathBuf {
        self.root.join("preprocessed")
    }

    pub fn preprocessed_manifest(&self) -> PathBuf {
        self.preprocessed_dir().join("manifest.csv")
    }

    pub fn augmented_index(&self) -> PathBuf {
        self.preprocessed_dir().join("augmented.csv")
    }

    pub fn model_dir(&self, modality: Modality, view: View) -> PathBuf {
        self.root.join("models").join(modality.as_str()).join(view.as_str())
    }

    pub fn model(&self, modality: Modality, view: View) -> PathBuf {
        self.model_dir(modality, view).join("finetune").join("selected.ckpt")
    }

    pub fn predictions(&self, modality: Modality, split: &str) -> PathBuf {
        self.root
            .join("predictions")
            .join(modality.as_str())
            .join(format!("{split}.csv"))
    }

    pub fn threshold(&self, modality: Modality) -> PathBuf {
        self.root
            .join("calibration")
            .join(modality.as_str())
            .join("threshold.json")
    }

    pub fn evaluation_dir(&self, modality: Modality) -> PathBuf {
        self.root.join("evaluation").join(modality.as_str())
    }

    pub fn eval_report(&self, modality: Modality) -> PathBuf {
        self.evaluation_dir(modality).join("report.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("report").join("summary.json")
    }

    pub fn run_manifest(&self, step: &str, modality: Option<Modality>) -> PathBuf {
        let name = match modality {
            Some(m) => format!("{step}-{}.json", m.as_str()),
            None => format!("{step}.json"),
        };
        self.root.join("runs").join(name)
    }

    /// `path` relative to the root when inside it.
    pub fn display(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

/// What one step ran on and produced. Written without timestamps so that
/// reruns on unchanged inputs reproduce it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub modality: Option<Modality>,
    pub seed: u64,
    pub config_sha256: String,
    /// The effective configuration.
    pub config: PipelineConfig,
    /// File (or volume-set) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub version: String,
}

/// Configuration and output root for one invocation.
#[derive(Debug, Clone)]
pub struct Context {
    /// Effective configuration.
    pub config: PipelineConfig,
    pub layout: Layout,
    pub modality: Option<Modality>,
}

impl Context {
    /// Validates `config` and applies the command-line overrides.
    pub fn new(
        mut config: PipelineConfig,
        seed: Option<u64>,
        out: Option<PathBuf>,
        modality: Option<Modality>,
    ) -> Result<Self, PipelineError> {
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(o) = out {
            config.paths.output_root = o;
        }
        config.validate()?;
        let layout = Layout::new(config.paths.output_root.clone(), config.paths.data_root.clone());
        Ok(Self {
            modality: modality.or(config.modality),
            config: config.effective(),
            layout,
        })
    }

    pub fn require_modality(&self) -> Result<Modality, PipelineError> {
        self.modality
            .ok_or_else(|| PipelineError::Config("this step needs --modality or a `modality` config entry".into()))
    }

    pub(crate) fn recorder(&self, step: &str, modality: Option<Modality>) -> Recorder<'_> {
        Recorder {
            ctx: self,
            step: step.to_string(),
            modality,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }
}

/// Collects hashes while a step runs, then writes its run manifest.
pub(crate) struct Recorder<'a> {
    ctx: &'a Context,
    step: String,
    modality: Option<Modality>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Recorder<'_> {
    pub fn input(&mut self, path: &Path) -> Result<(), PipelineError> {
        let h = sha256_file(path).map_err(io_err(path))?;
        self.inputs.insert(self.ctx.layout.display(path), h);
        Ok(())
    }

    pub fn input_volumes(&mut self, manifest: &DatasetManifest, root: &Path) -> Result<(), PipelineError> {
        let (_, digest) = volume_index(manifest, root)?;
        self.inputs
            .insert(format!("{}/volumes", self.ctx.layout.display(root)), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), PipelineError> {
        let h = sha256_file(path).map_err(io_err(path))?;
        self.outputs.insert(self.ctx.layout.display(path), h);
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf, PipelineError> {
        let config_json = to_canonical_json(&self.ctx.config)?;
        let manifest = RunManifest {
            subcommand: self.step.clone(),
            modality: self.modality,
            seed: self.ctx.config.seed,
            config_sha256: sha256_hex(config_json.as_bytes()),
            config: self.ctx.config.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = self.ctx.layout.run_manifest(&self.step, self.modality);
        write_text(&path, &to_canonical_json(&manifest)?)?;
        Ok(path)
    }
}

/// `sha256sum`-style lines for every series of `manifest` in path order,
/// and the SHA-256 of that text.
pub fn volume_index(manifest: &DatasetManifest, root: &Path) -> Result<(String, String), PipelineError> {
    let mut series: Vec<&crate::data::SeriesRef> = manifest.records.iter().flat_map(|r| r.series.iter()).collect();
    series.sort_by(|a, b| a.path.cmp(&b.path));
    let mut text = String::new();
    for s in series {
        let full = DatasetManifest::resolve(root, s);
        let h = sha256_file(&full).map_err(io_err(&full))?;
        text += &format!("{h}  {}\n", s.path.to_string_lossy().replace('\\', "/"));
    }
    let digest = sha256_hex(text.as_bytes());
    Ok((text, digest))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Fails with the step that produces `path` when it does not exist.
pub(crate) fn require(path: &Path, subcommand: &'static str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingPrerequisite {
            artifact: path.to_path_buf(),
            subcommand,
        })
    }
}
