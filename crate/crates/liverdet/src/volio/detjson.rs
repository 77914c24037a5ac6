//! Detection-set JSON: the wire format for lesion instances.
//!
//! Volumes are written with six significant digits and re-derived from the
//! RLE runs on read, with an integrity check that the stored value agrees
//! within 0.5%. Parse errors carry the JSON field path of the offender.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Spacing};
use crate::labels::ClassLabel;
use crate::seg2det::{BBox, Detection, DetectionSet};
use crate::volio::rle::RleMask;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionSetWire {
    case_id: String,
    dims: Dims,
    spacing_mm: Spacing,
    detections: Vec<DetectionWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionWire {
    id: u32,
    label: u8,
    voxel_count: usize,
    volume_cm3: f64,
    bbox: BBox,
    centroid: [f64; 3],
    rle: Vec<(usize, usize)>,
    score_cm3: Option<f64>,
}

/// Rounds to `digits` significant decimal digits.
fn round_sig(v: f64, digits: i32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let mag = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits - 1 - mag);
    (v * scale).round() / scale
}

/// Serializes a detection set to JSON.
pub fn write_detections(set: &DetectionSet) -> String {
    let wire = DetectionSetWire {
        case_id: set.case_id.clone(),
        dims: set.dims,
        spacing_mm: set.spacing,
        detections: set
            .detections
            .iter()
            .map(|d| DetectionWire {
                id: d.id,
                label: d.label.code(),
                voxel_count: d.voxel_count,
                volume_cm3: round_sig(d.volume_cm3, 6),
                bbox: d.bbox,
                centroid: [d.centroid.0, d.centroid.1, d.centroid.2],
                rle: d.mask.runs().to_vec(),
                score_cm3: d.score_cm3,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&wire).expect("detection set serializes")
}

pub fn write_detections_file(set: &DetectionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_detections(set)).map_err(|e| Error::io(path, e))
}

fn schema_err(path: String, message: impl Into<String>) -> Error {
    Error::DetectionSchema { path, message: message.into() }
}

/// Parses a detection set, validating every structural invariant.
pub fn read_detections(json: &str) -> Result<DetectionSet> {
    let de = &mut serde_json::Deserializer::from_str(json);
    let wire: DetectionSetWire = serde_path_to_error::deserialize(de)
        .map_err(|e| schema_err(e.path().to_string(), e.inner().to_string()))?;

    let dims = wire.dims;
    let spacing = wire.spacing_mm;
    let voxel_cm3 = spacing.voxel_volume_cm3();
    let mut seen_ids = std::collections::HashSet::new();
    let mut detections = Vec::with_capacity(wire.detections.len());
    for (i, d) in wire.detections.into_iter().enumerate() {
        let at = |field: &str| format!("detections[{i}].{field}");
        if !seen_ids.insert(d.id) {
            return Err(schema_err(at("id"), format!("duplicate id {}", d.id)));
        }
        let label = ClassLabel::lesion(d.label)
            .map_err(|e| schema_err(at("label"), e.to_string()))?;
        let mask = RleMask::from_runs(d.rle, dims)
            .map_err(|e| schema_err(at("rle"), e.to_string()))?;
        if mask.voxel_count() != d.voxel_count {
            return Err(schema_err(
                at("voxel_count"),
                format!("{} stored, {} in rle runs", d.voxel_count, mask.voxel_count()),
            ));
        }
        if mask.is_empty() {
            return Err(schema_err(at("rle"), "empty mask"));
        }
        let mut bbox: Option<BBox> = None;
        for flat in mask.iter_indices() {
            let (z, y, x) = dims.coords(flat);
            bbox = Some(match bbox {
                None => BBox { z0: z, y0: y, x0: x, z1: z, y1: y, x1: x },
                Some(b) => BBox {
                    z0: b.z0.min(z),
                    y0: b.y0.min(y),
                    x0: b.x0.min(x),
                    z1: b.z1.max(z),
                    y1: b.y1.max(y),
                    x1: b.x1.max(x),
                },
            });
        }
        let tight = bbox.expect("nonempty mask has a bbox");
        if tight != d.bbox {
            return Err(schema_err(
                at("bbox"),
                format!("stored {:?} is not the tight box {:?} of the runs", d.bbox, tight),
            ));
        }
        // Re-derive the volume; the stored decimal must agree within 0.5%.
        let recomputed = mask.voxel_count() as f64 * voxel_cm3;
        if (d.volume_cm3 - recomputed).abs() > 0.005 * recomputed {
            return Err(Error::VolumeIntegrity {
                id: d.id,
                stored: d.volume_cm3,
                recomputed,
            });
        }
        detections.push(Detection {
            id: d.id,
            label,
            mask,
            voxel_count: d.voxel_count,
            volume_cm3: recomputed,
            bbox: d.bbox,
            centroid: (d.centroid[0], d.centroid[1], d.centroid[2]),
            score_cm3: d.score_cm3,
        });
    }

    // Same-label masks must be pairwise disjoint.
    for a in 0..detections.len() {
        for b in a + 1..detections.len() {
            if detections[a].label == detections[b].label
                && detections[a].mask.intersection_voxels(&detections[b].mask) > 0
            {
                return Err(schema_err(
                    format!("detections[{b}].rle"),
                    format!(
                        "mask overlaps detection id {} of the same label",
                        detections[a].id
                    ),
                ));
            }
        }
    }

    Ok(DetectionSet { case_id: wire.case_id, dims, spacing, detections })
}

pub fn read_detections_file(path: impl AsRef<Path>) -> Result<DetectionSet> {
    let path = path.as_ref();
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_detections(&json).map_err(|e| match e {
        Error::DetectionSchema { path: field, message } => Error::DetectionSchema {
            path: format!("{}:{}", path.display(), field),
            message,
        },
        other => other,
    })
}
