//! Voxel grids with physical spacing.
//!
//! All grids in this crate share one canonical in-memory layout: a flat
//! row-major array over (Z, Y, X) with X varying fastest. Every flat index,
//! RLE run, and file payload in the crate refers to this order.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Grid dimensions as (Z, Y, X) voxel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Dims {
    pub fn new(z: usize, y: usize, x: usize) -> Self {
        Dims { z, y, x }
    }

    /// Total voxel count Z*Y*X.
    pub fn len(&self) -> usize {
        self.z * self.y * self.x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of (z, y, x); X fastest, Z slowest.
    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.y + y) * self.x + x
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, flat: usize) -> (usize, usize, usize) {
        let x = flat % self.x;
        let rest = flat / self.x;
        (rest / self.y, rest % self.y, x)
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        z < self.z && y < self.y && x < self.x
    }
}

impl Serialize for Dims {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.z, self.y, self.x].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Dims {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [z, y, x] = <[usize; 3]>::deserialize(d)?;
        Ok(Dims { z, y, x })
    }
}

/// Physical voxel spacing in millimetres, ordered (Z, Y, X) like [`Dims`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    pub z: f64,
    pub y: f64,
    pub x: f64,
}

impl Spacing {
    pub fn new(z: f64, y: f64, x: f64) -> Result<Self> {
        let s = Spacing { z, y, x };
        s.validate()?;
        Ok(s)
    }

    pub fn isotropic(mm: f64) -> Result<Self> {
        Spacing::new(mm, mm, mm)
    }

    fn validate(&self) -> Result<()> {
        for v in [self.z, self.y, self.x] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidGeometry(format!(
                    "spacing components must be positive and finite, got ({}, {}, {})",
                    self.z, self.y, self.x
                )));
            }
        }
        Ok(())
    }

    /// Physical volume of one voxel in cm3.
    pub fn voxel_volume_cm3(&self) -> f64 {
        self.z * self.y * self.x / 1000.0
    }
}

impl Serialize for Spacing {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.z, self.y, self.x].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Spacing {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [z, y, x] = <[f64; 3]>::deserialize(d)?;
        Spacing::new(z, y, x).map_err(|e| D::Error::custom(e.to_string()))
    }
}

/// Physical volume in cm3 of one voxel with the given spacing in mm.
pub fn voxel_volume_cm3(spacing: Spacing) -> f64 {
    spacing.voxel_volume_cm3()
}

/// A 3D array of voxels with physical spacing.
///
/// Immutable by convention once built; every algorithm in the crate produces
/// new grids rather than mutating shared ones.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<T>,
}

/// Label volume (class codes 0-13).
pub type LabelGrid = VoxelGrid<u8>;
/// Scalar volume (images, probability channels).
pub type ScalarGrid = VoxelGrid<f32>;

impl<T: Copy> VoxelGrid<T> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        spacing.validate()?;
        if data.len() != dims.len() {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                dims.len()
            )));
        }
        Ok(VoxelGrid { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.dims.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: T) {
        let i = self.dims.index(z, y, x);
        self.data[i] = value;
    }

    pub fn same_geometry<U: Copy>(&self, other: &VoxelGrid<U>) -> Result<()> {
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

    /// Maps every voxel, preserving geometry.
    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> VoxelGrid<U> {
        VoxelGrid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same data under a different physical spacing.
    pub fn with_spacing(self, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        Ok(VoxelGrid { dims: self.dims, spacing, data: self.data })
    }
}
