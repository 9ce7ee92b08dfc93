//! The in-memory volume container and its on-disk MVOL encoding.
//!
//! An MVOL file is a single-line UTF-8 JSON header terminated by `\n`,
//! followed by exactly `S*H*W` little-endian `f32` values in slice-major
//! order (slice, row, column).

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Longest header we are willing to scan for the terminating newline.
const MAX_HEADER_BYTES: usize = 1 << 16;
const DTYPE: &str = "f32le";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("MVOL header: missing field `{0}`")]
    MissingField(&'static str),
    #[error("MVOL header: invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("MVOL header is not valid JSON: {0}")]
    Header(String),
    #[error("MVOL payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid volume: {0}")]
    Validation(String),
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($name),
                        other,
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

string_enum!(
    /// Acquisition plane. Abduction/external-rotation series are not
    /// representable.
    View { Sagittal => "sagittal", Axial => "axial", Coronal => "coronal" }
);

string_enum!(
    SequenceType { T1 => "T1", T2 => "T2", Pd => "PD", Merge => "MERGE", Stir => "STIR" }
);

string_enum!(
    /// Standard (non-contrast) MRI or MR arthrogram.
    Modality { Standard => "standard", Arthrogram => "arthrogram" }
);

string_enum!(Side { Left => "left", Right => "right" });

/// Acquisition metadata carried alongside the voxels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub view: View,
    pub sequence_type: SequenceType,
    pub fat_sat: bool,
    pub modality: Modality,
    pub series_id: String,
    pub study_id: String,
    pub side: Side,
}

/// One MRI series: an `S x H x W` voxel grid plus its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeScan {
    pub voxels: Array3<f32>,
    pub meta: ScanMeta,
}

impl VolumeScan {
    /// Builds a scan, checking the shape and finiteness invariants.
    pub fn new(voxels: Array3<f32>, meta: ScanMeta) -> Result<Self, VolumeError> {
        let scan = Self { voxels, meta };
        scan.validate()?;
        Ok(scan)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn slices(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        let (s, h, w) = self.voxels.dim();
        if s == 0 || h == 0 || w == 0 {
            return Err(VolumeError::Validation(format!(
                "dimensions must be positive, got {s}x{h}x{w}"
            )));
        }
        if let Some(pos) = self.voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::Validation(format!(
                "non-finite voxel at flat index {pos} in series {}",
                self.meta.series_id
            )));
        }
        Ok(())
    }

    /// Copy of the scan with its in-plane content replaced.
    pub fn with_voxels(&self, voxels: Array3<f32>) -> Self {
        Self {
            voxels,
            meta: self.meta.clone(),
        }
    }
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    dims: [usize; 3],
    dtype: &'static str,
    view: View,
    sequence_type: SequenceType,
    fat_sat: bool,
    modality: Modality,
    series_id: &'a str,
    study_id: &'a str,
    side: Side,
}

/// Serializes a scan to MVOL bytes. Identical scans give identical bytes.
pub fn encode_volume(scan: &VolumeScan) -> Result<Vec<u8>, VolumeError> {
    scan.validate()?;
    let (s, h, w) = scan.dims();
    let header = HeaderOut {
        dims: [s, h, w],
        dtype: DTYPE,
        view: scan.meta.view,
        sequence_type: scan.meta.sequence_type,
        fat_sat: scan.meta.fat_sat,
        modality: scan.meta.modality,
        series_id: &scan.meta.series_id,
        study_id: &scan.meta.study_id,
        side: scan.meta.side,
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| VolumeError::Header(e.to_string()))?;
    out.push(b'\n');
    out.reserve(s * h * w * 4);
    // `iter` on a standard-layout array walks slice-major; non-standard
    // layouts still iterate in logical order.
    for v in scan.voxels.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_volume(scan: &VolumeScan, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    let bytes = encode_volume(scan)?;
    let io_err = |source| VolumeError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = BufWriter::new(File::create(path).map_err(io_err)?);
    file.write_all(&bytes).map_err(io_err)?;
    file.flush().map_err(io_err)
}

fn field<'a>(obj: &'a Map<String, Value>, name: &'static str) -> Result<&'a Value, VolumeError> {
    obj.get(name).ok_or(VolumeError::MissingField(name))
}

fn str_field<'a>(obj: &'a Map<String, Value>, name: &'static str) -> Result<&'a str, VolumeError> {
    field(obj, name)?.as_str().ok_or_else(|| VolumeError::InvalidField {
        field: name,
        reason: "expected a string".into(),
    })
}

fn enum_field<T: FromStr<Err = String>>(obj: &Map<String, Value>, name: &'static str) -> Result<T, VolumeError> {
    str_field(obj, name)?
        .parse()
        .map_err(|reason| VolumeError::InvalidField { field: name, reason })
}

fn parse_header(bytes: &[u8]) -> Result<(ScanMeta, [usize; 3]), VolumeError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| VolumeError::Header(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| VolumeError::Header("header is not a JSON object".into()))?;

    let dims_value = field(obj, "dims")?;
    let dims_err = |reason: &str| VolumeError::InvalidField {
        field: "dims",
        reason: reason.to_string(),
    };
    let dims_arr = dims_value
        .as_array()
        .ok_or_else(|| dims_err("expected an array [S, H, W]"))?;
    if dims_arr.len() != 3 {
        return Err(dims_err("expected exactly three entries"));
    }
    let mut dims = [0usize; 3];
    for (slot, v) in dims.iter_mut().zip(dims_arr) {
        let n = v
            .as_u64()
            .ok_or_else(|| dims_err("entries must be non-negative integers"))?;
        if n == 0 {
            return Err(dims_err("entries must be positive"));
        }
        *slot = usize::try_from(n).map_err(|_| dims_err("entry too large"))?;
    }

    let dtype = str_field(obj, "dtype")?;
    if dtype != DTYPE {
        return Err(VolumeError::InvalidField {
            field: "dtype",
            reason: format!("unsupported dtype `{dtype}`, expected `{DTYPE}`"),
        });
    }

    let fat_sat = field(obj, "fat_sat")?
        .as_bool()
        .ok_or_else(|| VolumeError::InvalidField {
            field: "fat_sat",
            reason: "expected a boolean".into(),
        })?;

    let meta = ScanMeta {
        view: enum_field(obj, "view")?,
        sequence_type: enum_field(obj, "sequence_type")?,
        fat_sat,
        modality: enum_field(obj, "modality")?,
        series_id: str_field(obj, "series_id")?.to_string(),
        study_id: str_field(obj, "study_id")?.to_string(),
        side: enum_field(obj, "side")?,
    };
    Ok((meta, dims))
}

/// Parses MVOL bytes.
pub fn decode_volume(bytes: &[u8]) -> Result<VolumeScan, VolumeError> {
    let newline = bytes
        .iter()
        .take(MAX_HEADER_BYTES)
        .position(|&b| b == b'\n')
        .ok_or_else(|| VolumeError::Header("no newline-terminated header found".into()))?;
    let (meta, [s, h, w]) = parse_header(&bytes[..newline])?;

    let payload = &bytes[newline + 1..];
    let expected = s
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| VolumeError::InvalidField {
            field: "dims",
            reason: "volume too large".into(),
        })?;
    if payload.len() != expected {
        return Err(VolumeError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let voxels = Array3::from_shape_vec((s, h, w), data).map_err(|e| VolumeError::Validation(e.to_string()))?;
    VolumeScan::new(voxels, meta)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeScan, VolumeError> {
    let path = path.as_ref();
    let io_err = |source| VolumeError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err)?)
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    decode_volume(&bytes)
}
