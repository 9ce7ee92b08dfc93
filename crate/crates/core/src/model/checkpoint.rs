//! Single-file checkpoints: a magic line, one line of JSON metadata, then
//! every parameter tensor as little-endian f64 in traversal order. The
//! metadata carries a SHA-256 of the payload so corruption never loads.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::Parameters;
use super::{Architecture, EncoderConfig, ModelError, ScanClassifier};

const MAGIC: &[u8] = b"BANKART-CKPT\n";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub architecture: Architecture,
    pub embedding_dim: usize,
    pub encoder: EncoderConfig,
    /// Free-form training provenance (stage, epoch, seeds, data hashes).
    pub provenance: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

pub(crate) fn is_checkpoint(bytes: &[u8]) -> bool {
    bytes.starts_with(MAGIC)
}

/// Writes `model` to `path` (via a temporary file and rename).
pub fn save_model(path: &Path, model: &ScanClassifier, provenance: &serde_json::Value) -> Result<(), ModelError> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(model.num_parameters() * 8);
    model.visit("", &mut |name, a| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: a.shape().to_vec(),
        });
        for v in a.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let meta = CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        architecture: model.architecture(),
        embedding_dim: model.embedding_dim(),
        encoder: model.config.clone(),
        provenance: provenance.clone(),
        tensors,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_string(&meta).map_err(|e| ModelError::Parse(e.to_string()))?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(header.as_bytes())?;
        f.write_all(b"\n")?;
        f.write_all(&payload)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(ScanClassifier, CheckpointMeta), ModelError> {
    let parse = |m: String| ModelError::Parse(m);
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| parse("missing checkpoint magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| parse("missing metadata terminator".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&rest[..nl]).map_err(|e| parse(format!("metadata: {e}")))?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "schema version {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
            meta.schema_version
        )));
    }
    let payload = &rest[nl + 1..];
    if hex::encode(Sha256::digest(payload)) != meta.payload_sha256 {
        return Err(parse("payload checksum mismatch".into()));
    }
    if meta.architecture != meta.encoder.architecture || meta.embedding_dim != meta.encoder.embedding_dim {
        return Err(parse("metadata disagrees with its encoder config".into()));
    }
    meta.encoder
        .validate_shape()
        .map_err(|e| parse(format!("stored encoder config: {e}")))?;

    let mut model = ScanClassifier::random(meta.encoder.clone());
    let mut expected = Vec::new();
    model.visit("", &mut |name, a| expected.push((name.to_string(), a.shape().to_vec())));
    let stored: Vec<(String, Vec<usize>)> = meta.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if stored != expected {
        return Err(parse("tensor index does not match the architecture".into()));
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(parse(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    model.visit_mut("", &mut |_, mut a| {
        for v in a.iter_mut() {
            *v = values.next().expect("length checked");
        }
    });
    Ok((model, meta))
}

/// Loads a checkpoint without comparing it to a configuration.
pub fn load_model_unchecked(path: &Path) -> Result<(ScanClassifier, CheckpointMeta), ModelError> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless its architecture and shape
/// match `expected`.
pub fn load_model(path: &Path, expected: &EncoderConfig) -> Result<ScanClassifier, ModelError> {
    let (model, meta) = load_model_unchecked(path)?;
    if meta.architecture != expected.architecture {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint holds a {} model, config expects {}",
            meta.architecture, expected.architecture
        )));
    }
    if meta.embedding_dim != expected.embedding_dim {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint embedding_dim {} differs from config {}",
            meta.embedding_dim, expected.embedding_dim
        )));
    }
    if expected.architecture == Architecture::HierarchicalWindowedTransformer
        && meta.encoder.transformer != expected.transformer
    {
        return Err(ModelError::Checkpoint("transformer variant differs from config".into()));
    }
    Ok(model)
}
