//! Lesion-shuffle augmentation: liver patches for training and inference.
//!
//! Four schemes. An original positive patch is cropped around a lesion; an
//! original negative patch is sampled from lesion-free liver. The shuffled
//! positive patch transplants a lesion's voxels into an original negative
//! patch, and the shuffled negative patch replaces a lesion's voxels with
//! donor texture from lesion-free liver. Transplants and excisions are hard
//! voxel copies under the lesion mask - no blending.
//!
//! Everything is seeded: each patch derives its own RNG stream from
//! (master seed, case, lesion, scheme, index), so output bytes are identical
//! across runs and thread counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, LabelGrid, ScalarGrid};
use crate::seeds;
use crate::seg2det::{Detection, DetectionSet};
use crate::volio::manifest::Phase;
use crate::volio::rle::RleMask;

/// Voxel value used outside the liver region in patch images (CT air).
pub const DEFAULT_FILL: f32 = -1024.0;

/// Patch geometry and sampling limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuffleConfig {
    /// Patch size in voxels (Z, Y, X).
    pub patch_dims: Dims,
    /// Image value outside the liver region.
    pub fill_value: f32,
    /// Minimum liver fraction of a lesion-free window.
    pub liver_min_fraction: f64,
    /// Rejection-sampling budget per decision.
    pub max_attempts: u32,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        ShuffleConfig {
            patch_dims: Dims { z: 16, y: 128, x: 128 },
            fill_value: DEFAULT_FILL,
            liver_min_fraction: 0.25,
            max_attempts: 100,
        }
    }
}

/// The four shuffling schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    OrigPos,
    OrigNeg,
    ShufPos,
    ShufNeg,
}

impl Scheme {
    pub fn tag(self) -> &'static str {
        match self {
            Scheme::OrigPos => "orig-pos",
            Scheme::OrigNeg => "orig-neg",
            Scheme::ShufPos => "shuf-pos",
            Scheme::ShufNeg => "shuf-neg",
        }
    }

    fn code(self) -> u64 {
        match self {
            Scheme::OrigPos => 1,
            Scheme::OrigNeg => 2,
            Scheme::ShufPos => 3,
            Scheme::ShufNeg => 4,
        }
    }
}

/// Provenance of the voxel edit a shuffled patch carries; mock segmenters
/// use it to relocate ground truth. Not part of the wire format.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchEdit {
    None,
    /// Lesion voxels were copied by `offset` (dest = source + offset).
    Transplant { offset: (i64, i64, i64) },
    /// These patch-local voxels were overwritten with donor texture taken
    /// `offset` away in case coordinates.
    Excise { voxels: RleMask, offset: (i64, i64, i64) },
}

/// One augmentation patch: image crop per phase plus a reference label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// One image per available phase, in phase order.
    pub images: Vec<(Phase, ScalarGrid)>,
    /// Reference lesion labels (0-6) at patch coordinates.
    pub mask: LabelGrid,
    /// Patch corner in case coordinates.
    pub origin: (usize, usize, usize),
    pub scheme: Scheme,
    /// Source lesion, when the scheme has one.
    pub lesion_id: Option<u32>,
    /// The derived seed that produced this patch.
    pub rng_seed: u64,
    /// Set when a transplant could not be placed and the patch fell back to
    /// an original positive crop.
    pub fallback: bool,
    pub edit: PatchEdit,
}

impl Patch {
    pub fn dims(&self) -> Dims {
        self.mask.dims()
    }

    /// Foreground voxel count of the reference mask.
    pub fn mask_voxels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v != 0).count()
    }
}

fn prefix_sums(dims: Dims, mut value: impl FnMut(usize) -> u32) -> Vec<u32> {
    let (nz, ny, nx) = (dims.z + 1, dims.y + 1, dims.x + 1);
    let mut sat = vec![0u32; nz * ny * nx];
    let at = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    let mut flat = 0usize;
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let v = value(flat);
                sat[at(z + 1, y + 1, x + 1)] = v + sat[at(z, y + 1, x + 1)]
                    + sat[at(z + 1, y, x + 1)]
                    + sat[at(z + 1, y + 1, x)]
                    - sat[at(z, y, x + 1)]
                    - sat[at(z, y + 1, x)]
                    - sat[at(z + 1, y, x)]
                    + sat[at(z, y, x)];
                flat += 1;
            }
        }
    }
    sat
}

fn window_count(sat: &[u32], dims: Dims, lo: (usize, usize, usize), len: Dims) -> u32 {
    let (ny, nx) = (dims.y + 1, dims.x + 1);
    let at = |z: usize, y: usize, x: usize| sat[(z * ny + y) * nx + x] as i64;
    let (z0, y0, x0) = lo;
    let (z1, y1, x1) = (z0 + len.z, y0 + len.y, x0 + len.x);
    let count = at(z1, y1, x1) - at(z0, y1, x1) - at(z1, y0, x1) - at(z1, y1, x0)
        + at(z0, y0, x1)
        + at(z0, y1, x0)
        + at(z1, y0, x0)
        - at(z0, y0, x0);
    count as u32
}

/// A case prepared for patch sampling: images, a label mask, and the known
/// lesion instances.
///
/// The label mask may be ground truth (training) or a model prediction
/// (inference); the liver region used for cropping is the union of the liver
/// label and all lesion labels, since lesions sit inside the organ.
pub struct ShuffleContext {
    pub case_id: String,
    pub phases: Vec<(Phase, ScalarGrid)>,
    pub labels: LabelGrid,
    pub detections: DetectionSet,
    pub cfg: ShuffleConfig,
    liver_region_sat: Vec<u32>,
    lesion_sat: Vec<u32>,
}

impl ShuffleContext {
    pub fn new(
        phases: Vec<(Phase, ScalarGrid)>,
        labels: LabelGrid,
        detections: DetectionSet,
        cfg: ShuffleConfig,
    ) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::EmptyInput("shuffle context needs at least one image phase"));
        }
        for (_, img) in &phases {
            img.same_geometry(&labels)?;
        }
        if labels.dims() != detections.dims {
            return Err(Error::DimsMismatch { left: labels.dims(), right: detections.dims });
        }
        let mut phases = phases;
        phases.sort_by_key(|(p, _)| *p);
        let data = labels.data();
        let liver_region_sat =
            prefix_sums(labels.dims(), |i| u32::from((1..=7).contains(&data[i])));
        let lesion_sat = prefix_sums(labels.dims(), |i| u32::from((1..=6).contains(&data[i])));
        Ok(ShuffleContext {
            case_id: detections.case_id.clone(),
            phases,
            labels,
            detections,
            cfg,
            liver_region_sat,
            lesion_sat,
        })
    }

    pub fn dims(&self) -> Dims {
        self.labels.dims()
    }

    fn in_liver_region(&self, flat: usize) -> bool {
        (1..=7).contains(&self.labels.data()[flat])
    }

    fn strictly_liver(&self, z: i64, y: i64, x: i64) -> bool {
        if z < 0 || y < 0 || x < 0 {
            return false;
        }
        let (z, y, x) = (z as usize, y as usize, x as usize);
        self.dims().contains(z, y, x)
            && self.labels.get(z, y, x) == crate::labels::ClassLabel::LIVER.code()
    }

    /// Raw lesion-labeled voxels under a detection's mask. For instances
    /// extracted from this context's label mask that is the whole mask; for
    /// injected instances it can be less.
    fn raw_under(&self, det: &Detection) -> usize {
        let data = self.labels.data();
        det.mask.iter_indices().filter(|&i| (1..=6).contains(&data[i])).count()
    }

    fn axis_range_containing(
        &self,
        lo: usize,
        hi: usize, // inclusive bbox bounds on this axis
        patch: usize,
        dim: usize,
    ) -> Option<(usize, usize)> {
        if hi - lo + 1 > patch || dim < patch {
            return None;
        }
        let min = hi.saturating_sub(patch - 1);
        let max = lo.min(dim - patch);
        (min <= max).then_some((min, max))
    }

    fn other_detections_clear(&self, det_id: Option<u32>, lo: (usize, usize, usize)) -> bool {
        let p = self.cfg.patch_dims;
        let hi = (lo.0 + p.z - 1, lo.1 + p.y - 1, lo.2 + p.x - 1);
        self.detections.detections.iter().all(|other| {
            Some(other.id) == det_id
                || !(other.bbox.lo() <= hi && lo <= other.bbox.hi())
                || !other.mask.intersects_box(self.dims(), lo, hi)
        })
    }

    /// Samples a window fully containing the lesion, inside the volume, and
    /// free of any other lesion voxels.
    fn sample_lesion_window(
        &self,
        det: &Detection,
        rng: &mut ChaCha8Rng,
    ) -> Result<(usize, usize, usize)> {
        let p = self.cfg.patch_dims;
        let dims = self.dims();
        let b = det.bbox;
        let extent = b.extent();
        if extent.0 > p.z || extent.1 > p.y || extent.2 > p.x {
            return Err(Error::LesionTooLarge {
                id: det.id,
                extent,
                patch: (p.z, p.y, p.x),
            });
        }
        let zr = self.axis_range_containing(b.z0, b.z1, p.z, dims.z);
        let yr = self.axis_range_containing(b.y0, b.y1, p.y, dims.y);
        let xr = self.axis_range_containing(b.x0, b.x1, p.x, dims.x);
        let (zr, yr, xr) = match (zr, yr, xr) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::InvalidGeometry(format!(
                    "volume {dims:?} cannot hold a {p:?} patch around lesion {}",
                    det.id
                )))
            }
        };
        let target_raw = self.raw_under(det) as u32;
        for _ in 0..self.cfg.max_attempts {
            let lo = (
                rng.random_range(zr.0..=zr.1),
                rng.random_range(yr.0..=yr.1),
                rng.random_range(xr.0..=xr.1),
            );
            let lesions_here = window_count(&self.lesion_sat, dims, lo, p);
            if lesions_here == target_raw && self.other_detections_clear(Some(det.id), lo) {
                return Ok(lo);
            }
        }
        Err(Error::SamplingExhausted {
            attempts: self.cfg.max_attempts,
            what: format!("window around lesion {} without other lesions", det.id),
        })
    }

    /// Samples a window with enough liver and no lesion voxels at all.
    fn sample_negative_window(&self, rng: &mut ChaCha8Rng) -> Result<(usize, usize, usize)> {
        let p = self.cfg.patch_dims;
        let dims = self.dims();
        if dims.z < p.z || dims.y < p.y || dims.x < p.x {
            return Err(Error::InvalidGeometry(format!(
                "volume {dims:?} cannot hold a {p:?} patch"
            )));
        }
        let min_liver = (self.cfg.liver_min_fraction * p.len() as f64).ceil() as u32;
        for _ in 0..self.cfg.max_attempts {
            let lo = (
                rng.random_range(0..=dims.z - p.z),
                rng.random_range(0..=dims.y - p.y),
                rng.random_range(0..=dims.x - p.x),
            );
            if window_count(&self.lesion_sat, dims, lo, p) == 0
                && window_count(&self.liver_region_sat, dims, lo, p) >= min_liver
                && self.other_detections_clear(None, lo)
            {
                return Ok(lo);
            }
        }
        Err(Error::SamplingExhausted {
            attempts: self.cfg.max_attempts,
            what: "lesion-free liver window".into(),
        })
    }

    /// Crops images (filling outside the liver region) and paints the
    /// reference mask from the known detections inside the window.
    fn crop(&self, lo: (usize, usize, usize)) -> (Vec<(Phase, ScalarGrid)>, LabelGrid) {
        let p = self.cfg.patch_dims;
        let dims = self.dims();
        let spacing = self.labels.spacing();
        let mut images = Vec::with_capacity(self.phases.len());
        for (phase, img) in &self.phases {
            let mut data = vec![self.cfg.fill_value; p.len()];
            let mut local = 0usize;
            for z in lo.0..lo.0 + p.z {
                for y in lo.1..lo.1 + p.y {
                    let row = dims.index(z, y, lo.2);
                    for dx in 0..p.x {
                        let case_flat = row + dx;
                        if self.in_liver_region(case_flat) {
                            data[local] = img.data()[case_flat];
                        }
                        local += 1;
                    }
                }
            }
            images.push((*phase, ScalarGrid::new(p, spacing, data).expect("patch geometry")));
        }
        let hi = (lo.0 + p.z - 1, lo.1 + p.y - 1, lo.2 + p.x - 1);
        let mut mask = vec![0u8; p.len()];
        for det in &self.detections.detections {
            if !(det.bbox.lo() <= hi && lo <= det.bbox.hi()) {
                continue;
            }
            for flat in det.mask.iter_indices() {
                let (z, y, x) = dims.coords(flat);
                if z >= lo.0 && z <= hi.0 && y >= lo.1 && y <= hi.1 && x >= lo.2 && x <= hi.2
                {
                    let local = p.index(z - lo.0, y - lo.1, x - lo.2);
                    mask[local] = det.label.code();
                }
            }
        }
        (images, LabelGrid::new(p, spacing, mask).expect("patch geometry"))
    }
}

fn patch_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Original positive patch: a random crop fully containing the lesion.
pub fn sample_lesion_patch(ctx: &ShuffleContext, det: &Detection, seed: u64) -> Result<Patch> {
    let mut rng = patch_rng(seed);
    let lo = ctx.sample_lesion_window(det, &mut rng)?;
    let (images, mask) = ctx.crop(lo);
    Ok(Patch {
        images,
        mask,
        origin: lo,
        scheme: Scheme::OrigPos,
        lesion_id: Some(det.id),
        rng_seed: seed,
        fallback: false,
        edit: PatchEdit::None,
    })
}

/// Original negative patch: lesion-free liver.
pub fn sample_negative_patch(ctx: &ShuffleContext, seed: u64) -> Result<Patch> {
    let mut rng = patch_rng(seed);
    let lo = ctx.sample_negative_window(&mut rng)?;
    let (images, mask) = ctx.crop(lo);
    debug_assert!(mask.data().iter().all(|&v| v == 0));
    Ok(Patch {
        images,
        mask,
        origin: lo,
        scheme: Scheme::OrigNeg,
        lesion_id: None,
        rng_seed: seed,
        fallback: false,
        edit: PatchEdit::None,
    })
}

/// Shuffled positive patch: the lesion's voxels copied into lesion-free
/// liver inside an original negative window. Falls back to an original
/// positive patch (flagged) when no placement exists.
pub fn transplant(ctx: &ShuffleContext, det: &Detection, seed: u64) -> Result<Patch> {
    let mut rng = patch_rng(seed);
    let p = ctx.cfg.patch_dims;
    let dims = ctx.dims();
    let b = det.bbox;
    let extent = b.extent();
    if extent.0 > p.z || extent.1 > p.y || extent.2 > p.x {
        return Err(Error::LesionTooLarge { id: det.id, extent, patch: (p.z, p.y, p.x) });
    }

    let placed = 'search: {
        let lo = match ctx.sample_negative_window(&mut rng) {
            Ok(lo) => lo,
            Err(_) => break 'search None,
        };
        // Offset ranges keeping the translated bbox inside the window.
        let dz = (lo.0 as i64 - b.z0 as i64, (lo.0 + p.z - 1) as i64 - b.z1 as i64);
        let dy = (lo.1 as i64 - b.y0 as i64, (lo.1 + p.y - 1) as i64 - b.y1 as i64);
        let dx = (lo.2 as i64 - b.x0 as i64, (lo.2 + p.x - 1) as i64 - b.x1 as i64);
        for _ in 0..ctx.cfg.max_attempts {
            let offset = (
                rng.random_range(dz.0..=dz.1),
                rng.random_range(dy.0..=dy.1),
                rng.random_range(dx.0..=dx.1),
            );
            let valid = det.mask.iter_indices().all(|flat| {
                let (z, y, x) = dims.coords(flat);
                ctx.strictly_liver(z as i64 + offset.0, y as i64 + offset.1, x as i64 + offset.2)
            });
            if valid {
                break 'search Some((lo, offset));
            }
        }
        None
    };

    let Some((lo, offset)) = placed else {
        // Never silent: the fallback patch is flagged.
        let mut patch = sample_lesion_patch(ctx, det, seeds::mix(&[seed, 0xfa11bacc]))?;
        patch.scheme = Scheme::ShufPos;
        patch.rng_seed = seed;
        patch.fallback = true;
        return Ok(patch);
    };

    let (mut images, mut mask) = ctx.crop(lo);
    for flat in det.mask.iter_indices() {
        let (z, y, x) = dims.coords(flat);
        let dest = (
            (z as i64 + offset.0) as usize,
            (y as i64 + offset.1) as usize,
            (x as i64 + offset.2) as usize,
        );
        let local = p.index(dest.0 - lo.0, dest.1 - lo.1, dest.2 - lo.2);
        for (phase_idx, (_, img)) in ctx.phases.iter().enumerate() {
            images[phase_idx].1.data_mut()[local] = img.data()[flat];
        }
        mask.data_mut()[local] = det.label.code();
    }

    Ok(Patch {
        images,
        mask,
        origin: lo,
        scheme: Scheme::ShufPos,
        lesion_id: Some(det.id),
        rng_seed: seed,
        fallback: false,
        edit: PatchEdit::Transplant { offset },
    })
}

/// Shuffled negative patch: the lesion's voxels replaced by congruent donor
/// texture from lesion-free liver.
pub fn excise(ctx: &ShuffleContext, det: &Detection, seed: u64) -> Result<Patch> {
    let mut rng = patch_rng(seed);
    let dims = ctx.dims();
    let p = ctx.cfg.patch_dims;
    let lo = ctx.sample_lesion_window(det, &mut rng)?;
    let b = det.bbox;

    // Donor offset ranges keeping the congruent region inside the volume.
    let dz = (-(b.z0 as i64), (dims.z - 1) as i64 - b.z1 as i64);
    let dy = (-(b.y0 as i64), (dims.y - 1) as i64 - b.y1 as i64);
    let dx = (-(b.x0 as i64), (dims.x - 1) as i64 - b.x1 as i64);
    let mut donor: Option<(i64, i64, i64)> = None;
    for _ in 0..ctx.cfg.max_attempts {
        let offset =
            (rng.random_range(dz.0..=dz.1), rng.random_range(dy.0..=dy.1), rng.random_range(dx.0..=dx.1));
        let valid = det.mask.iter_indices().all(|flat| {
            let (z, y, x) = dims.coords(flat);
            ctx.strictly_liver(z as i64 + offset.0, y as i64 + offset.1, x as i64 + offset.2)
        });
        if valid {
            donor = Some(offset);
            break;
        }
    }
    let Some(offset) = donor else {
        return Err(Error::SamplingExhausted {
            attempts: ctx.cfg.max_attempts,
            what: format!("donor liver region congruent to lesion {}", det.id),
        });
    };

    let (mut images, mut mask) = ctx.crop(lo);
    let mut local_voxels = LabelGrid::filled(p, ctx.labels.spacing(), 0).expect("patch geometry");
    for flat in det.mask.iter_indices() {
        let (z, y, x) = dims.coords(flat);
        let local = p.index(z - lo.0, y - lo.1, x - lo.2);
        let donor_flat = dims.index(
            (z as i64 + offset.0) as usize,
            (y as i64 + offset.1) as usize,
            (x as i64 + offset.2) as usize,
        );
        for (phase_idx, (_, img)) in ctx.phases.iter().enumerate() {
            images[phase_idx].1.data_mut()[local] = img.data()[donor_flat];
        }
        mask.data_mut()[local] = 0;
        local_voxels.data_mut()[local] = 1;
    }
    debug_assert!(mask.data().iter().all(|&v| v == 0));

    Ok(Patch {
        images,
        mask,
        origin: lo,
        scheme: Scheme::ShufNeg,
        lesion_id: Some(det.id),
        rng_seed: seed,
        fallback: false,
        edit: PatchEdit::Excise { voxels: RleMask::encode(&local_voxels), offset },
    })
}

fn derived_seed(ctx: &ShuffleContext, master: u64, lesion: u64, scheme: Scheme, index: u64) -> u64 {
    seeds::mix(&[master, seeds::word(&ctx.case_id), lesion, scheme.code(), index])
}

/// Training patches: per lesion and per scheme up to `per_lesion` patches,
/// with the original-negative count matched to the positive count for
/// balance. Per-patch failures are collected, not fatal.
pub fn make_training_patches(
    ctx: &ShuffleContext,
    per_lesion: usize,
    seed: u64,
) -> (Vec<Patch>, Vec<Error>) {
    let mut patches = Vec::new();
    let mut errors = Vec::new();
    let mut positives = 0usize;
    let mut shuf_negs = 0usize;
    for det in &ctx.detections.detections {
        for scheme in [Scheme::OrigPos, Scheme::ShufPos, Scheme::ShufNeg] {
            for index in 0..per_lesion {
                let s = derived_seed(ctx, seed, det.id as u64, scheme, index as u64);
                let produced = match scheme {
                    Scheme::OrigPos => sample_lesion_patch(ctx, det, s),
                    Scheme::ShufPos => transplant(ctx, det, s),
                    Scheme::ShufNeg => excise(ctx, det, s),
                    Scheme::OrigNeg => unreachable!(),
                };
                match produced {
                    Ok(p) => {
                        match p.scheme {
                            Scheme::ShufNeg => shuf_negs += 1,
                            _ => positives += 1,
                        }
                        patches.push(p);
                    }
                    Err(e) => errors.push(e),
                }
            }
        }
    }
    let neg_target = if ctx.detections.is_empty() {
        per_lesion
    } else {
        positives.saturating_sub(shuf_negs)
    };
    for index in 0..neg_target {
        let s = derived_seed(ctx, seed, 0, Scheme::OrigNeg, index as u64);
        match sample_negative_patch(ctx, s) {
            Ok(p) => patches.push(p),
            Err(e) => errors.push(e),
        }
    }
    (patches, errors)
}

/// Sidecar index written next to a patch bundle's NIfTI files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub scheme: String,
    pub origin: [usize; 3],
    pub lesion_id: Option<u32>,
    pub seed: u64,
    pub fallback: bool,
    pub phases: Vec<String>,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
}

impl PatchIndex {
    pub fn of(patch: &Patch) -> Self {
        let dims = patch.dims();
        let spacing = patch.mask.spacing();
        PatchIndex {
            scheme: patch.scheme.tag().to_string(),
            origin: [patch.origin.0, patch.origin.1, patch.origin.2],
            lesion_id: patch.lesion_id,
            seed: patch.rng_seed,
            fallback: patch.fallback,
            phases: patch.images.iter().map(|(p, _)| p.tag().to_string()).collect(),
            dims: [dims.z, dims.y, dims.x],
            spacing_mm: [spacing.z, spacing.y, spacing.x],
        }
    }
}

/// Writes a patch as a bundle directory: `image_<PHASE>.nii.gz` per phase,
/// `mask.nii.gz`, and `index.json`.
pub fn write_patch_bundle(patch: &Patch, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (phase, img) in &patch.images {
        crate::volio::nifti::write_scalar(img, dir.join(format!("image_{}.nii.gz", phase.tag())))?;
    }
    crate::volio::nifti::write_labels(&patch.mask, dir.join("mask.nii.gz"))?;
    let index = serde_json::to_string_pretty(&PatchIndex::of(patch))?;
    let index_path = dir.join("index.json");
    std::fs::write(&index_path, index).map_err(|e| Error::io(index_path, e))
}

/// Inference patches for one lesion: N patches alternating original
/// positive and shuffled positive (all original positive when shuffling is
/// disabled or impossible).
pub fn make_inference_patches(
    ctx: &ShuffleContext,
    det: &Detection,
    n: usize,
    allow_shuffle: bool,
    seed: u64,
) -> Result<Vec<Patch>> {
    let mut out = Vec::with_capacity(n);
    for index in 0..n {
        let shuffled = allow_shuffle && index % 2 == 1;
        let scheme = if shuffled { Scheme::ShufPos } else { Scheme::OrigPos };
        let s = derived_seed(ctx, seed, det.id as u64, scheme, index as u64);
        let patch = if shuffled {
            transplant(ctx, det, s)?
        } else {
            sample_lesion_patch(ctx, det, s)?
        };
        out.push(patch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;
    use crate::seg2det::extract_lesions;

    /// A small synthetic case: a liver slab with one or more lesions.
    /// Patch dims are shrunk so tests stay fast.
    fn test_cfg() -> ShuffleConfig {
        ShuffleConfig {
            patch_dims: Dims { z: 4, y: 16, x: 16 },
            ..ShuffleConfig::default()
        }
    }

    type Blob = ((usize, usize, usize), (usize, usize, usize), u8);

    fn slab_case(lesions: &[Blob]) -> ShuffleContext {
        let dims = Dims::new(8, 32, 32);
        let spacing = Spacing::isotropic(2.0).unwrap();
        let mut labels = LabelGrid::filled(dims, spacing, 0).unwrap();
        // Liver occupies the central block.
        for z in 1..7 {
            for y in 2..30 {
                for x in 2..30 {
                    labels.set(z, y, x, 7);
                }
            }
        }
        for &(lo, hi, class) in lesions {
            for z in lo.0..=hi.0 {
                for y in lo.1..=hi.1 {
                    for x in lo.2..=hi.2 {
                        labels.set(z, y, x, class);
                    }
                }
            }
        }
        let dets = extract_lesions(&labels, "slab", 0.0).unwrap();
        let mut image = LabelGrid::filled(dims, spacing, 0u8).unwrap().map(|_| 0.0f32);
        // Distinct value per voxel so copies are traceable.
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            *v = i as f32;
        }
        ShuffleContext::new(vec![(Phase::NC, image)], labels, dets, test_cfg()).unwrap()
    }

    fn single_lesion() -> ((usize, usize, usize), (usize, usize, usize), u8) {
        ((3, 10, 10), (4, 13, 13), 1)
    }

    #[test]
    fn lesion_patch_is_deterministic_and_contains_lesion() {
        let ctx = slab_case(&[single_lesion()]);
        let det = &ctx.detections.detections[0];
        let a = sample_lesion_patch(&ctx, det, 42).unwrap();
        let b = sample_lesion_patch(&ctx, det, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mask_voxels(), det.voxel_count);
        // Lesion bbox inside window.
        let (p, o) = (ctx.cfg.patch_dims, a.origin);
        assert!(det.bbox.z0 >= o.0 && det.bbox.z1 < o.0 + p.z);
        assert!(det.bbox.y0 >= o.1 && det.bbox.y1 < o.1 + p.y);
        assert!(det.bbox.x0 >= o.2 && det.bbox.x1 < o.2 + p.x);
        let c = sample_lesion_patch(&ctx, det, 43).unwrap();
        assert!(a.origin != c.origin || a == c);
    }

    #[test]
    fn negative_patch_has_no_lesion_and_enough_liver() {
        let ctx = slab_case(&[single_lesion()]);
        let patch = sample_negative_patch(&ctx, 7).unwrap();
        assert_eq!(patch.mask_voxels(), 0);
        let liver_fraction = patch.images[0]
            .1
            .data()
            .iter()
            .filter(|&&v| v != ctx.cfg.fill_value)
            .count() as f64
            / patch.dims().len() as f64;
        assert!(liver_fraction >= 0.25);
    }

    #[test]
    fn fill_value_outside_liver_region() {
        let ctx = slab_case(&[single_lesion()]);
        let det = &ctx.detections.detections[0];
        let patch = sample_lesion_patch(&ctx, det, 1).unwrap();
        let dims = ctx.dims();
        for (local, &v) in patch.images[0].1.data().iter().enumerate() {
            let (z, y, x) = patch.dims().coords(local);
            let case_flat =
                dims.index(z + patch.origin.0, y + patch.origin.1, x + patch.origin.2);
            let inside = (1..=7).contains(&ctx.labels.data()[case_flat]);
            if inside {
                assert_eq!(v, case_flat as f32);
            } else {
                assert_eq!(v, ctx.cfg.fill_value);
            }
        }
    }

    #[test]
    fn oversized_lesion_rejected() {
        // Lesion spanning z 1..=6 exceeds the 4-slice patch.
        let ctx = slab_case(&[((1, 10, 10), (6, 12, 12), 2)]);
        let det = &ctx.detections.detections[0];
        let err = sample_lesion_patch(&ctx, det, 0).unwrap_err();
        assert!(matches!(err, Error::LesionTooLarge { .. }));
    }

    #[test]
    fn transplant_conserves_voxels_and_stays_in_liver() {
        let ctx = slab_case(&[single_lesion()]);
        let det = &ctx.detections.detections[0];
        let patch = transplant(&ctx, det, 11).unwrap();
        assert_eq!(patch.scheme, Scheme::ShufPos);
        assert!(!patch.fallback);
        assert_eq!(patch.mask_voxels(), det.voxel_count);

        let PatchEdit::Transplant { offset } = patch.edit else {
            panic!("expected transplant edit");
        };
        let dims = ctx.dims();
        // Every source value appears verbatim at its destination, and every
        // destination voxel was strictly liver before the copy.
        for flat in det.mask.iter_indices() {
            let (z, y, x) = dims.coords(flat);
            let dest = (
                (z as i64 + offset.0) as usize,
                (y as i64 + offset.1) as usize,
                (x as i64 + offset.2) as usize,
            );
            assert_eq!(ctx.labels.get(dest.0, dest.1, dest.2), 7);
            let local = patch.dims().index(
                dest.0 - patch.origin.0,
                dest.1 - patch.origin.1,
                dest.2 - patch.origin.2,
            );
            assert_eq!(patch.images[0].1.data()[local], flat as f32);
            assert_eq!(patch.mask.data()[local], det.label.code());
        }

        // Per-phase sum over the mask equals the sum over the source voxels.
        let source_sum: f64 = det.mask.iter_indices().map(|f| f as f64).sum();
        let patch_sum: f64 = patch
            .mask
            .data()
            .iter()
            .zip(patch.images[0].1.data())
            .filter(|(m, _)| **m != 0)
            .map(|(_, v)| *v as f64)
            .sum();
        assert_eq!(source_sum, patch_sum);
    }

    #[test]
    fn transplant_same_seed_identical() {
        let ctx = slab_case(&[single_lesion()]);
        let det = &ctx.detections.detections[0];
        assert_eq!(transplant(&ctx, det, 5).unwrap(), transplant(&ctx, det, 5).unwrap());
    }

    #[test]
    fn transplant_falls_back_when_no_room() {
        // Liver too thin to host the lesion anywhere else: lesion fills most
        // of it, so placement fails and we get a flagged orig-pos crop.
        let dims = Dims::new(8, 32, 32);
        let spacing = Spacing::isotropic(2.0).unwrap();
        let mut labels = LabelGrid::filled(dims, spacing, 0).unwrap();
        for y in 10..14 {
            for x in 10..14 {
                labels.set(3, y, x, 7);
            }
        }
        for y in 10..13 {
            for x in 10..13 {
                labels.set(3, y, x, 4);
            }
        }
        let dets = extract_lesions(&labels, "tight", 0.0).unwrap();
        let image = labels.map(|_| 0.0f32);
        let ctx =
            ShuffleContext::new(vec![(Phase::NC, image)], labels, dets, test_cfg()).unwrap();
        let det = &ctx.detections.detections[0];
        let patch = transplant(&ctx, det, 3).unwrap();
        assert!(patch.fallback);
        assert_eq!(patch.scheme, Scheme::ShufPos);
        assert_eq!(patch.edit, PatchEdit::None);
        assert_eq!(patch.mask_voxels(), det.voxel_count);
    }

    #[test]
    fn excise_clears_mask_and_edits_only_lesion_voxels() {
        let ctx = slab_case(&[single_lesion()]);
        let det = &ctx.detections.detections[0];
        let patch = excise(&ctx, det, 13).unwrap();
        assert_eq!(patch.scheme, Scheme::ShufNeg);
        assert_eq!(patch.mask_voxels(), 0);

        // Voxels outside the lesion mask are bit-identical to a plain crop
        // at the same origin.
        let (plain_images, _) = ctx.crop(patch.origin);
        let PatchEdit::Excise { ref voxels, .. } = patch.edit else {
            panic!("expected excise edit");
        };
        let edited: std::collections::HashSet<usize> = voxels.iter_indices().collect();
        for (local, (&got, &plain)) in
            patch.images[0].1.data().iter().zip(plain_images[0].1.data()).enumerate()
        {
            if edited.contains(&local) {
                // Donor values come from strictly-liver voxels.
                let donor_flat = got as usize;
                assert_eq!(ctx.labels.data()[donor_flat], 7);
            } else {
                assert_eq!(got, plain);
            }
        }
    }

    #[test]
    fn training_patch_mix_balances_negatives() {
        let ctx = slab_case(&[single_lesion()]);
        let (patches, errors) = make_training_patches(&ctx, 5, 99);
        assert!(errors.is_empty(), "{errors:?}");
        let count = |s: Scheme| patches.iter().filter(|p| p.scheme == s).count();
        assert_eq!(count(Scheme::OrigPos), 5);
        assert_eq!(count(Scheme::ShufPos), 5);
        assert_eq!(count(Scheme::ShufNeg), 5);
        assert_eq!(count(Scheme::OrigNeg), 5);
        assert_eq!(patches.len(), 20);
        // Negatives carry no lesion voxels of the case.
        let dims = ctx.dims();
        for p in &patches {
            if matches!(p.scheme, Scheme::OrigNeg) {
                for local in 0..p.dims().len() {
                    let (z, y, x) = p.dims().coords(local);
                    let case =
                        dims.index(z + p.origin.0, y + p.origin.1, x + p.origin.2);
                    assert!(!(1..=6).contains(&ctx.labels.data()[case]));
                }
            }
        }
    }

    #[test]
    fn no_lesions_gives_only_negatives() {
        let ctx = slab_case(&[]);
        let (patches, errors) = make_training_patches(&ctx, 4, 1);
        assert!(errors.is_empty());
        assert_eq!(patches.len(), 4);
        assert!(patches.iter().all(|p| p.scheme == Scheme::OrigNeg));
    }

    #[test]
    fn training_patches_reproducible() {
        let ctx = slab_case(&[single_lesion()]);
        let (a, _) = make_training_patches(&ctx, 3, 2024);
        let (b, _) = make_training_patches(&ctx, 3, 2024);
        assert_eq!(a, b);
    }

    #[test]
    fn inference_patches_mix_and_count() {
        let ctx = slab_case(&[single_lesion()]);
        let det = &ctx.detections.detections[0];
        let ps = make_inference_patches(&ctx, det, 10, true, 5).unwrap();
        assert_eq!(ps.len(), 10);
        for p in &ps {
            assert_eq!(p.mask_voxels(), det.voxel_count);
            assert_eq!(p.lesion_id, Some(det.id));
        }
        assert!(ps.iter().any(|p| p.scheme == Scheme::ShufPos));
        let plain = make_inference_patches(&ctx, det, 10, false, 5).unwrap();
        assert!(plain.iter().all(|p| p.scheme == Scheme::OrigPos));
        let one = make_inference_patches(&ctx, det, 1, true, 5).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].scheme, Scheme::OrigPos);
    }

    #[test]
    fn lesion_window_avoids_other_lesions() {
        // Two lesions far apart: windows around one never include the other.
        let ctx = slab_case(&[((2, 4, 4), (3, 6, 6), 1), ((4, 24, 24), (5, 26, 26), 1)]);
        assert_eq!(ctx.detections.len(), 2);
        let dims = ctx.dims();
        for det in &ctx.detections.detections {
            for seed in 0..20u64 {
                let p = sample_lesion_patch(&ctx, det, seed).unwrap();
                assert_eq!(p.mask_voxels(), det.voxel_count);
                for local in 0..p.dims().len() {
                    if p.mask.data()[local] != 0 {
                        let (z, y, x) = p.dims().coords(local);
                        let case =
                            dims.index(z + p.origin.0, y + p.origin.1, x + p.origin.2);
                        assert!(det.mask.iter_indices().any(|f| f == case));
                    }
                }
            }
        }
    }
}
