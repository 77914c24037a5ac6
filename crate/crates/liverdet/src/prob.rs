//! Per-voxel class confidence maps.
//!
//! One scalar channel per [`ClassLabel`](crate::labels::ClassLabel): channel
//! 0 is background, 1-6 the lesion classes, 7-13 the organs. Values are
//! normalized to sum to one per voxel on ingest; sensitivity scaling later
//! breaks that on purpose (argmax does not need normalized inputs).

use crate::error::{Error, Result};
use crate::grid::{Dims, ScalarGrid, Spacing};
use crate::labels::ClassLabel;

/// 14-channel per-voxel class confidences sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMaps {
    channels: Vec<ScalarGrid>,
}

impl ProbMaps {
    /// Wraps 14 channels without renormalizing. Geometry must agree; use
    /// [`ProbMaps::normalized`] for data from external sources.
    pub fn new(channels: Vec<ScalarGrid>) -> Result<Self> {
        if channels.len() != ClassLabel::COUNT {
            return Err(Error::ChannelCount(channels.len()));
        }
        for c in &channels[1..] {
            channels[0].same_geometry(c)?;
        }
        Ok(ProbMaps { channels })
    }

    /// Ingest normalization: clamps channels into [0, 1] and uniformly
    /// rescales each voxel whose channel sum falls outside 1 +/- 1e-3.
    /// Values below -1e-3 and voxels with no mass at all are rejected.
    pub fn normalized(channels: Vec<ScalarGrid>) -> Result<Self> {
        let mut maps = ProbMaps::new(channels)?;
        let n = maps.dims().len();
        for voxel in 0..n {
            let mut sum = 0.0f64;
            for (ci, ch) in maps.channels.iter_mut().enumerate() {
                let v = ch.data()[voxel];
                if v < -1e-3 {
                    return Err(Error::InvalidProbability { channel: ci, voxel, value: v });
                }
                let v = v.clamp(0.0, 1.0);
                ch.data_mut()[voxel] = v;
                sum += v as f64;
            }
            if (sum - 1.0).abs() <= 1e-3 {
                continue;
            }
            if sum <= 0.0 {
                return Err(Error::InvalidProbability { channel: 0, voxel, value: 0.0 });
            }
            let inv = (1.0 / sum) as f32;
            for ch in maps.channels.iter_mut() {
                ch.data_mut()[voxel] *= inv;
            }
        }
        Ok(maps)
    }

    pub fn dims(&self) -> Dims {
        self.channels[0].dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.channels[0].spacing()
    }

    pub fn channel(&self, label: ClassLabel) -> &ScalarGrid {
        &self.channels[label.code() as usize]
    }

    pub fn channels(&self) -> &[ScalarGrid] {
        &self.channels
    }

    pub(crate) fn channels_mut(&mut self) -> &mut [ScalarGrid] {
        &mut self.channels
    }

    pub fn into_channels(self) -> Vec<ScalarGrid> {
        self.channels
    }
}
