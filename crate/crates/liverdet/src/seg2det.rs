//! Conversion of a multi-class label mask into individual lesion instances.
//!
//! Instances are formed per lesion class: 2D connected components with
//! 8-connectivity inside each axial slice, merged across adjacent slices
//! wherever they share a (y, x) pixel coordinate. Components below the
//! minimum volume are dropped. The output ordering is canonical - ascending
//! (label, first flat index) - so results do not depend on traversal or
//! thread scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, LabelGrid, Spacing, VoxelGrid};
use crate::labels::ClassLabel;
use crate::volio::rle::RleMask;

/// Default minimum instance volume in cm3; smaller components are discarded.
pub const DEFAULT_MIN_VOLUME_CM3: f64 = 0.5;

/// Inclusive voxel bounding box (z0, y0, x0) ..= (z1, y1, x1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub z0: usize,
    pub y0: usize,
    pub x0: usize,
    pub z1: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    /// Extent in voxels along (Z, Y, X).
    pub fn extent(&self) -> (usize, usize, usize) {
        (self.z1 - self.z0 + 1, self.y1 - self.y0 + 1, self.x1 - self.x0 + 1)
    }

    pub fn lo(&self) -> (usize, usize, usize) {
        (self.z0, self.y0, self.x0)
    }

    pub fn hi(&self) -> (usize, usize, usize) {
        (self.z1, self.y1, self.x1)
    }

    pub fn overlaps(&self, other: &BBox) -> bool {
        self.z0 <= other.z1
            && other.z0 <= self.z1
            && self.y0 <= other.y1
            && other.y0 <= self.y1
            && self.x0 <= other.x1
            && other.x0 <= self.x1
    }
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.z0, self.y0, self.x0, self.z1, self.y1, self.x1].serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [z0, y0, x0, z1, y1, x1] = <[usize; 6]>::deserialize(d)?;
        Ok(BBox { z0, y0, x0, z1, y1, x1 })
    }
}

/// One lesion instance: class, voxel mask, and derived geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub id: u32,
    pub label: ClassLabel,
    pub mask: RleMask,
    pub voxel_count: usize,
    pub volume_cm3: f64,
    pub bbox: BBox,
    /// Unweighted mean voxel coordinate (z, y, x).
    pub centroid: (f64, f64, f64),
    /// Reclassification score; set by the reclassify stage.
    pub score_cm3: Option<f64>,
}

/// All lesion instances of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub case_id: String,
    pub dims: Dims,
    pub spacing: Spacing,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn empty(case_id: impl Into<String>, dims: Dims, spacing: Spacing) -> Self {
        DetectionSet { case_id: case_id.into(), dims, spacing, detections: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Detection> {
        self.detections.iter().find(|d| d.id == id)
    }

    /// Lesion labels present in the set.
    pub fn labels(&self) -> Vec<ClassLabel> {
        let mut ls: Vec<ClassLabel> = self.detections.iter().map(|d| d.label).collect();
        ls.sort();
        ls.dedup();
        ls
    }

    pub fn same_geometry(&self, other: &DetectionSet) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimsMismatch { left: self.dims, right: other.dims });
        }
        if self.spacing != other.spacing {
            return Err(Error::InvalidGeometry(format!(
                "spacing mismatch: {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        // Path halving.
        while self.parent[i as usize] != i {
            let grand = self.parent[self.parent[i as usize] as usize];
            self.parent[i as usize] = grand;
            i = grand;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller flat index wins; keeps roots deterministic.
            if ra < rb {
                self.parent[rb as usize] = ra;
            } else {
                self.parent[ra as usize] = rb;
            }
        }
    }
}

struct ComponentBuilder {
    label: u8,
    count: usize,
    first: usize,
    min: (usize, usize, usize),
    max: (usize, usize, usize),
    sum: (u64, u64, u64),
    runs: Vec<(usize, usize)>,
}

impl ComponentBuilder {
    fn new(label: u8, flat: usize, z: usize, y: usize, x: usize) -> Self {
        ComponentBuilder {
            label,
            count: 1,
            first: flat,
            min: (z, y, x),
            max: (z, y, x),
            sum: (z as u64, y as u64, x as u64),
            runs: vec![(flat, 1)],
        }
    }

    fn push(&mut self, flat: usize, z: usize, y: usize, x: usize) {
        self.count += 1;
        self.min = (self.min.0.min(z), self.min.1.min(y), self.min.2.min(x));
        self.max = (self.max.0.max(z), self.max.1.max(y), self.max.2.max(x));
        self.sum = (self.sum.0 + z as u64, self.sum.1 + y as u64, self.sum.2 + x as u64);
        let last = self.runs.last_mut().expect("builder always holds one run");
        if last.0 + last.1 == flat {
            last.1 += 1;
        } else {
            self.runs.push((flat, 1));
        }
    }
}

/// Extracts individual lesion instances from a label mask.
///
/// Organ labels and background are ignored; components of different lesion
/// classes are never merged even when adjacent.
pub fn extract_lesions(
    mask: &LabelGrid,
    case_id: &str,
    min_volume_cm3: f64,
) -> Result<DetectionSet> {
    let dims = mask.dims();
    let n = dims.len();
    if n >= u32::MAX as usize {
        return Err(Error::InvalidGeometry(format!("grid of {n} voxels exceeds labeling limit")));
    }
    let data = mask.data();
    let mut uf = UnionFind::new(n);
    let plane = dims.y * dims.x;

    let is_lesion = |v: u8| (1..=6).contains(&v);

    let mut flat = 0usize;
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let v = data[flat];
                if is_lesion(v) {
                    // In-plane 8-connectivity: W, NW, N, NE already scanned.
                    if x > 0 && data[flat - 1] == v {
                        uf.union(flat as u32, (flat - 1) as u32);
                    }
                    if y > 0 {
                        let north = flat - dims.x;
                        if data[north] == v {
                            uf.union(flat as u32, north as u32);
                        }
                        if x > 0 && data[north - 1] == v {
                            uf.union(flat as u32, (north - 1) as u32);
                        }
                        if x + 1 < dims.x && data[north + 1] == v {
                            uf.union(flat as u32, (north + 1) as u32);
                        }
                    }
                    // Through-plane: same (y, x) on the previous slice.
                    if z > 0 && data[flat - plane] == v {
                        uf.union(flat as u32, (flat - plane) as u32);
                    }
                }
                flat += 1;
            }
        }
    }

    // Second pass in ascending flat order: the first voxel seen for a root is
    // the component's smallest flat index.
    let mut builders: Vec<ComponentBuilder> = Vec::new();
    let mut root_slot: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    let mut flat = 0usize;
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let v = data[flat];
                if is_lesion(v) {
                    let root = uf.find(flat as u32);
                    match root_slot.get(&root) {
                        Some(&slot) => builders[slot].push(flat, z, y, x),
                        None => {
                            root_slot.insert(root, builders.len());
                            builders.push(ComponentBuilder::new(v, flat, z, y, x));
                        }
                    }
                }
                flat += 1;
            }
        }
    }

    let voxel_cm3 = mask.spacing().voxel_volume_cm3();
    let mut kept: Vec<ComponentBuilder> = builders
        .into_iter()
        .filter(|b| b.count as f64 * voxel_cm3 >= min_volume_cm3)
        .collect();
    kept.sort_by_key(|b| (b.label, b.first));

    let detections = kept
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let count = b.count as f64;
            Ok(Detection {
                id: (i + 1) as u32,
                label: ClassLabel::lesion(b.label)?,
                mask: RleMask::from_runs(b.runs, dims)?,
                voxel_count: b.count,
                volume_cm3: b.count as f64 * voxel_cm3,
                bbox: BBox {
                    z0: b.min.0,
                    y0: b.min.1,
                    x0: b.min.2,
                    z1: b.max.0,
                    y1: b.max.1,
                    x1: b.max.2,
                },
                centroid: (
                    b.sum.0 as f64 / count,
                    b.sum.1 as f64 / count,
                    b.sum.2 as f64 / count,
                ),
                score_cm3: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DetectionSet {
        case_id: case_id.to_string(),
        dims,
        spacing: mask.spacing(),
        detections,
    })
}

/// Binary mask of voxels labeled liver (class 7).
///
/// Lesion voxels enclosed by the liver keep their own labels and are *not*
/// part of this mask.
pub fn extract_liver_mask(mask: &LabelGrid) -> VoxelGrid<u8> {
    mask.map(|v| u8::from(v == ClassLabel::LIVER.code()))
}
