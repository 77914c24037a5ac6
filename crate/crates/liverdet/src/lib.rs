//! Cascaded liver-lesion detection for volumetric CT, downstream of any
//! voxel-wise segmentation model.
//!
//! The pipeline turns 14-channel probability maps into patient-level
//! answers in five stages:
//!
//! 1. **Sensitivity scaling** - lesion channels are multiplied by a factor f
//!    before the per-voxel argmax, producing label masks at configurable
//!    lesion sensitivity ([`sensitivity`]).
//! 2. **Instance extraction** - per-slice connected components merged across
//!    adjacent slices turn each mask into individual lesion instances
//!    ([`seg2det`]).
//! 3. **Reclassification** - each instance is scored by a patch segmenter
//!    over shuffle-augmented liver patches; weak instances are discarded and
//!    labels corrected by volume voting ([`shuffle`], [`reclassify`]).
//! 4. **Cross-sensitivity matching** - runs at different sensitivities are
//!    merged into consensus and difference sets ([`matcher`]).
//! 5. **Evaluation** - lesion-level and patient-level metrics against ground
//!    truth ([`metrics`]).
//!
//! A deterministic synthetic [`phantom`] generator with analytic ground
//! truth serves as the test oracle, and [`pipeline`] orchestrates whole
//! cohorts. See the book under `book/` for a guided tour.

pub mod error;
pub mod grid;
pub mod labels;
pub mod matcher;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod prob;
pub mod reclassify;
pub(crate) mod seeds;
pub mod seg2det;
pub mod sensitivity;
pub mod shuffle;
pub mod volio;

pub use error::{Error, Result};
pub use grid::{voxel_volume_cm3, Dims, LabelGrid, ScalarGrid, Spacing, VoxelGrid};
pub use labels::{priority_max, ClassLabel};
pub use prob::ProbMaps;
pub use seg2det::{extract_lesions, extract_liver_mask, Detection, DetectionSet};
pub use sensitivity::SensitivityFactor;
pub use volio::{Phase, RleMask};

#[cfg(doctest)]
mod book;
