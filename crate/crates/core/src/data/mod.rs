//! Volume container, dataset manifest and split assignment.

pub mod manifest;
pub mod split;
pub mod volume;

pub use manifest::{DatasetManifest, Label, ManifestError, SeriesRef, Split, StudyRecord};
pub use split::{apportion, split_counts, stratified_split, SplitError, SplitFractions, StratifyMode};
pub use volume::{
    decode_volume, encode_volume, read_volume, write_volume, Modality, ScanMeta, SequenceType, Side, View, VolumeError,
    VolumeScan,
};
