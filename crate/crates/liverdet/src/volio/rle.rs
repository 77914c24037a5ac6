//! Run-length encoding of binary masks over the canonical flat voxel order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Spacing, VoxelGrid};

/// A binary mask stored as maximal runs of consecutive flat indices.
///
/// Runs are sorted ascending, non-overlapping, and non-adjacent, so the
/// encoding of any mask is unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RleMask {
    runs: Vec<(usize, usize)>,
}

impl RleMask {
    /// Builds from raw (start, length) runs, validating the invariants
    /// against a grid of `dims`.
    pub fn from_runs(runs: Vec<(usize, usize)>, dims: Dims) -> Result<Self> {
        let max = dims.len();
        let mut prev_end: Option<usize> = None;
        for &(start, len) in &runs {
            if len == 0 {
                return Err(Error::RleRuns { start });
            }
            if start.checked_add(len).is_none_or(|end| end > max) {
                return Err(Error::RleBounds { start, len, max });
            }
            if let Some(end) = prev_end {
                // `start == end` would mean two adjacent runs, i.e. non-maximal.
                if start <= end {
                    return Err(Error::RleRuns { start });
                }
            }
            prev_end = Some(start + len);
        }
        Ok(RleMask { runs })
    }

    /// Encodes a binary grid (any nonzero voxel is foreground).
    pub fn encode(grid: &VoxelGrid<u8>) -> Self {
        let mut runs = Vec::new();
        let mut current: Option<(usize, usize)> = None;
        for (i, &v) in grid.data().iter().enumerate() {
            if v != 0 {
                match current {
                    Some((_, ref mut len)) => *len += 1,
                    None => current = Some((i, 1)),
                }
            } else if let Some(run) = current.take() {
                runs.push(run);
            }
        }
        if let Some(run) = current {
            runs.push(run);
        }
        RleMask { runs }
    }

    /// Decodes into a {0, 1} grid of the given geometry.
    pub fn decode(&self, dims: Dims, spacing: Spacing) -> Result<VoxelGrid<u8>> {
        let max = dims.len();
        let mut data = vec![0u8; max];
        for &(start, len) in &self.runs {
            if start.checked_add(len).is_none_or(|end| end > max) {
                return Err(Error::RleBounds { start, len, max });
            }
            data[start..start + len].fill(1);
        }
        VoxelGrid::new(dims, spacing, data)
    }

    pub fn runs(&self) -> &[(usize, usize)] {
        &self.runs
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Total number of foreground voxels.
    pub fn voxel_count(&self) -> usize {
        self.runs.iter().map(|&(_, len)| len).sum()
    }

    /// First (smallest) flat index of the mask, if any.
    pub fn first_index(&self) -> Option<usize> {
        self.runs.first().map(|&(start, _)| start)
    }

    /// Iterates all foreground flat indices in ascending order.
    pub fn iter_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.runs.iter().flat_map(|&(start, len)| start..start + len)
    }

    /// Number of voxels shared with another mask over the same grid.
    pub fn intersection_voxels(&self, other: &RleMask) -> usize {
        let (mut i, mut j) = (0, 0);
        let mut total = 0;
        while i < self.runs.len() && j < other.runs.len() {
            let (a0, alen) = self.runs[i];
            let (b0, blen) = other.runs[j];
            let (a1, b1) = (a0 + alen, b0 + blen);
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo < hi {
                total += hi - lo;
            }
            if a1 <= b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    /// True if any voxel of the mask falls inside the inclusive box.
    pub fn intersects_box(
        &self,
        dims: Dims,
        lo: (usize, usize, usize),
        hi: (usize, usize, usize),
    ) -> bool {
        self.iter_indices().any(|flat| {
            let (z, y, x) = dims.coords(flat);
            z >= lo.0 && z <= hi.0 && y >= lo.1 && y <= hi.1 && x >= lo.2 && x <= hi.2
        })
    }
}
