//! Scan-level classifier: a 2-D slice encoder shared across slices,
//! element-wise max pooling over the slice axis, and an affine head with a
//! logistic link.

mod checkpoint;
mod conv;
pub mod layers;
mod pretrained;
pub mod swin;

use std::path::PathBuf;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{View, VolumeScan};
use crate::preprocess::CROP_SIZE;

pub use checkpoint::{load_model, load_model_unchecked, save_model, CheckpointMeta, CHECKPOINT_SCHEMA_VERSION};
pub use conv::SmallConvEncoder;
use layers::{join, FeatureMap, Parameters};
pub use pretrained::load_pretrained_encoder;
pub use swin::{SwinConfig, SwinEncoder};

/// Probabilities are kept this far inside the open unit interval.
pub const PROBABILITY_MARGIN: f64 = 1e-12;

pub const SMALL_CONV_DEFAULT_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("slices must be {expected}x{expected}, got {height}x{width}")]
    Shape {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("scan has no slices")]
    EmptyScan,
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    HierarchicalWindowedTransformer,
    SmallConvBaseline,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::HierarchicalWindowedTransformer => "hierarchical_windowed_transformer",
            Self::SmallConvBaseline => "small_conv_baseline",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsInit {
    /// Encoder weights from a natural-image pretrained file at `checkpoint_path`.
    ImagenetPretrained,
    Random,
    /// Encoder and head from a checkpoint written by [`save_model`].
    FromCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub embedding_dim: usize,
    #[serde(default = "three")]
    pub input_channels: usize,
    pub weights_init: WeightsInit,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    /// Seed for randomly initialized parameters.
    #[serde(default)]
    pub init_seed: u64,
    /// Required for `small_conv_baseline`.
    #[serde(default)]
    pub desk_scale: bool,
    #[serde(default)]
    pub transformer: SwinConfig,
}

fn three() -> usize {
    3
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let transformer = SwinConfig::tiny();
        Self {
            architecture: Architecture::HierarchicalWindowedTransformer,
            embedding_dim: transformer.output_dim(),
            input_channels: 3,
            weights_init: WeightsInit::ImagenetPretrained,
            checkpoint_path: None,
            init_seed: 0,
            desk_scale: false,
            transformer,
        }
    }
}

impl EncoderConfig {
    /// Small convolutional encoder with random initialization.
    pub fn desk_scale(embedding_dim: usize, init_seed: u64) -> Self {
        Self {
            architecture: Architecture::SmallConvBaseline,
            embedding_dim,
            weights_init: WeightsInit::Random,
            init_seed,
            desk_scale: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.validate_shape()?;
        if self.weights_init != WeightsInit::Random && self.checkpoint_path.is_none() {
            return Err(ModelError::InvalidConfig(format!(
                "weights_init {:?} requires checkpoint_path",
                self.weights_init
            )));
        }
        Ok(())
    }

    /// Checks everything that determines parameter shapes.
    pub fn validate_shape(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be >= 1".into());
        }
        if self.input_channels != 3 {
            return bad(format!("input_channels is fixed at 3, got {}", self.input_channels));
        }
        match self.architecture {
            Architecture::SmallConvBaseline if !self.desk_scale => {
                return bad("small_conv_baseline is only permitted with desk_scale".into());
            }
            Architecture::SmallConvBaseline => {}
            Architecture::HierarchicalWindowedTransformer => {
                self.transformer
                    .validate(CROP_SIZE)
                    .map_err(ModelError::InvalidConfig)?;
                if self.embedding_dim != self.transformer.output_dim() {
                    return bad(format!(
                        "embedding_dim {} does not match the transformer output width {}",
                        self.embedding_dim,
                        self.transformer.output_dim()
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SliceEncoder {
    Transformer(SwinEncoder),
    SmallConv(SmallConvEncoder),
}

enum EncoderCache {
    Transformer(swin::SwinCache),
    SmallConv(conv::SmallConvCache),
}

impl SliceEncoder {
    fn build(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        match config.architecture {
            Architecture::HierarchicalWindowedTransformer => Self::Transformer(SwinEncoder::new(
                &config.transformer,
                config.input_channels,
                CROP_SIZE,
                rng,
            )),
            Architecture::SmallConvBaseline => {
                Self::SmallConv(SmallConvEncoder::new(config.input_channels, config.embedding_dim, rng))
            }
        }
    }

    fn forward(&self, x: &FeatureMap) -> (Array2<f64>, EncoderCache) {
        match self {
            Self::Transformer(e) => {
                let (y, c) = e.forward(x);
                (y, EncoderCache::Transformer(c))
            }
            Self::SmallConv(e) => {
                let (y, c) = e.forward(x);
                (y, EncoderCache::SmallConv(c))
            }
        }
    }

    fn backward(&self, cache: &EncoderCache, d_embed: &Array2<f64>, grad: &mut Self) {
        match (self, cache, grad) {
            (Self::Transformer(e), EncoderCache::Transformer(c), Self::Transformer(g)) => e.backward(c, d_embed, g),
            (Self::SmallConv(e), EncoderCache::SmallConv(c), Self::SmallConv(g)) => e.backward(c, d_embed, g),
            _ => unreachable!("gradient buffer built from the same model"),
        }
    }
}

impl Parameters for SliceEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        match self {
            Self::Transformer(e) => e.visit(prefix, f),
            Self::SmallConv(e) => e.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        match self {
            Self::Transformer(e) => e.visit_mut(prefix, f),
            Self::SmallConv(e) => e.visit_mut(prefix, f),
        }
    }
}

/// Affine map `D -> 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Array1::zeros(dim),
            bias: Array1::zeros(1),
        }
    }

    /// Weight and bias uniform in `±1/sqrt(dim)`.
    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            weight: Array1::from_shape_simple_fn(dim, || rng.random_range(-bound..bound)),
            bias: Array1::from_elem(1, rng.random_range(-bound..bound)),
        }
    }

    pub fn logit(&self, features: &Array1<f64>) -> f64 {
        self.weight.dot(features) + self.bias[0]
    }
}

impl Parameters for ClassifierHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(PROBABILITY_MARGIN, 1.0 - PROBABILITY_MARGIN)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanClassifier {
    pub config: EncoderConfig,
    pub encoder: SliceEncoder,
    pub head: ClassifierHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPrediction {
    pub study_id: String,
    pub series_id: String,
    pub view: View,
    pub probability: f64,
}

/// Forward state of one scan kept for the backward pass.
pub struct ScanForward {
    pub logit: f64,
    pub probability: f64,
    pub pooled: Array1<f64>,
    cache: EncoderCache,
    argmax: Vec<usize>,
    slices: usize,
}

impl ScanClassifier {
    /// Builds a model as directed by `config.weights_init`.
    pub fn new(config: EncoderConfig) -> Result<Self, ModelError> {
        config.validate()?;
        match config.weights_init {
            WeightsInit::Random => Ok(Self::random(config)),
            WeightsInit::ImagenetPretrained => {
                let path = config.checkpoint_path.clone().expect("validated");
                let mut model = Self::random(config);
                load_pretrained_encoder(&path, &mut model.encoder)?;
                Ok(model)
            }
            WeightsInit::FromCheckpoint => {
                let path = config.checkpoint_path.clone().expect("validated");
                let mut model = load_model(&path, &config)?;
                model.config = config;
                Ok(model)
            }
        }
    }

    /// Encoder and head drawn from `config.init_seed`.
    pub fn random(config: EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoder = SliceEncoder::build(&config, &mut rng);
        let head = ClassifierHead::random(config.embedding_dim, &mut rng);
        Self { config, encoder, head }
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// A same-shaped model with every parameter zero, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill(0.0);
        g
    }

    /// Per-slice embeddings, `S x D`.
    pub fn encode_slices(&self, scan: &VolumeScan) -> Result<Array2<f64>, ModelError> {
        let input = slices_to_input(scan, self.config.input_channels)?;
        Ok(self.encoder.forward(&input).0)
    }

    pub fn predict_scan(&self, scan: &VolumeScan) -> Result<ScanPrediction, ModelError> {
        let f = self.forward_scan(scan)?;
        Ok(ScanPrediction {
            study_id: scan.meta.study_id.clone(),
            series_id: scan.meta.series_id.clone(),
            view: scan.meta.view,
            probability: f.probability,
        })
    }

    pub fn forward_scan(&self, scan: &VolumeScan) -> Result<ScanForward, ModelError> {
        let input = slices_to_input(scan, self.config.input_channels)?;
        let (embeddings, cache) = self.encoder.forward(&input);
        let (pooled, argmax) = max_with_argmax(&embeddings.view())?;
        let logit = self.head.logit(&pooled);
        Ok(ScanForward {
            logit,
            probability: sigmoid(logit),
            pooled,
            cache,
            argmax,
            slices: embeddings.nrows(),
        })
    }

    /// Accumulates `d_logit * d(logit)/d(params)` into `grad`.
    pub fn backward_scan(&self, fwd: &ScanForward, d_logit: f64, grad: &mut ScanClassifier) {
        let mut d_embed = Array2::<f64>::zeros((fwd.slices, self.embedding_dim()));
        for (j, &s) in fwd.argmax.iter().enumerate() {
            d_embed[[s, j]] = d_logit * self.head.weight[j];
        }
        grad.head.weight.scaled_add(d_logit, &fwd.pooled);
        grad.head.bias[0] += d_logit;
        self.encoder.backward(&fwd.cache, &d_embed, &mut grad.encoder);
    }
}

impl Parameters for ScanClassifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Per-channel normalisation the pretrained encoders expect; channel `c`
/// uses entry `c % 3`.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Stacks the slices of a preprocessed scan as `S` images, replicating the
/// single intensity channel `channels` times and normalising each copy with
/// the ImageNet statistics.
pub fn slices_to_input(scan: &VolumeScan, channels: usize) -> Result<FeatureMap, ModelError> {
    let (s, h, w) = scan.dims();
    if h != CROP_SIZE || w != CROP_SIZE {
        return Err(ModelError::Shape {
            expected: CROP_SIZE,
            height: h,
            width: w,
        });
    }
    if s == 0 {
        return Err(ModelError::EmptyScan);
    }
    let flat: Vec<f64> = scan.voxels.iter().map(|&v| v as f64).collect();
    let data = Array2::from_shape_fn((s * h * w, channels), |(r, c)| {
        (flat[r] - IMAGENET_MEAN[c % 3]) / IMAGENET_STD[c % 3]
    });
    Ok(FeatureMap { n: s, h, w, data })
}

/// Element-wise maximum over the slice axis.
pub fn aggregate_max(embeddings: &ArrayView2<f64>) -> Result<Array1<f64>, ModelError> {
    max_with_argmax(embeddings).map(|(m, _)| m)
}

/// Maximum and the first slice attaining it, per feature.
fn max_with_argmax(embeddings: &ArrayView2<f64>) -> Result<(Array1<f64>, Vec<usize>), ModelError> {
    if embeddings.nrows() == 0 {
        return Err(ModelError::EmptyScan);
    }
    let mut best = embeddings.row(0).to_owned();
    let mut arg = vec![0; embeddings.ncols()];
    for (s, row) in embeddings.axis_iter(Axis(0)).enumerate().skip(1) {
        for (j, &v) in row.iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                arg[j] = s;
            }
        }
    }
    Ok((best, arg))
}
