use std::path::PathBuf;

use crate::grid::Dims;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI maps them to exit codes: everything
/// that stems from bad input data or files is an input error (exit 2), while
/// a broken segmenter contract is a contract violation (exit 3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("dims mismatch: {left:?} vs {right:?}")]
    DimsMismatch { left: Dims, right: Dims },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid sensitivity factor {0}: must be positive and finite")]
    InvalidFactor(f64),

    #[error("nifti: bad value in header field `{field}`: {message}")]
    NiftiHeader { field: &'static str, message: String },

    #[error("nifti: unsupported datatype code {0} (supported: 2=u8, 4=i16, 16=f32)")]
    UnsupportedDatatype(i16),

    #[error("nifti: payload holds {actual} bytes, header implies {expected}")]
    PayloadMismatch { expected: usize, actual: usize },

    #[error("probability maps: channel count {0}, expected 14")]
    ChannelCount(usize),

    #[error("invalid probability {value} in channel {channel} at voxel {voxel}")]
    InvalidProbability {
        channel: usize,
        voxel: usize,
        value: f32,
    },

    #[error("rle: run ({start}, {len}) exceeds grid of {max} voxels")]
    RleBounds { start: usize, len: usize, max: usize },

    #[error("rle: runs must be sorted, disjoint, and maximal (offender starts at {start})")]
    RleRuns { start: usize },

    #[error("detection json at `{path}`: {message}")]
    DetectionSchema { path: String, message: String },

    #[error(
        "detection {id}: stored volume {stored} cm3 differs from runs x spacing ({recomputed} cm3) by more than 0.5%"
    )]
    VolumeIntegrity { id: u32, stored: f64, recomputed: f64 },

    #[error("lesion {id}: bounding box {extent:?} does not fit patch dims {patch:?}")]
    LesionTooLarge {
        id: u32,
        extent: (usize, usize, usize),
        patch: (usize, usize, usize),
    },

    #[error("sampling exhausted after {attempts} attempts: {what}")]
    SamplingExhausted { attempts: u32, what: String },

    #[error("segmenter contract violation: {0}")]
    ContractViolation(String),

    #[error("patient classification: {0}")]
    Classification(String),

    #[error("manifest `{path}`: {message}")]
    Manifest { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 for input/parse problems, 3 for
    /// contract violations. Usage errors (exit 1) never reach this type.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ContractViolation(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
