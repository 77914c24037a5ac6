//! File I/O: a minimal NIfTI-1 subset for volumes and probability stacks,
//! run-length-encoded binary masks, the detection-set JSON format, and
//! per-case manifests.

pub mod detjson;
pub mod manifest;
pub mod nifti;
pub mod rle;

pub use detjson::{read_detections, read_detections_file, write_detections, write_detections_file};
pub use manifest::{discover_manifests, CaseManifest, Phase};
pub use nifti::{
    read_probmaps, read_volume, write_labels, write_probmaps, write_scalar, write_volume, Volume,
};
pub use rle::RleMask;
