//! Deterministic synthetic cases with analytic ground truth, plus mock patch
//! segmenters. These stand in for clinical data and trained networks in
//! every test of the cascade.
//!
//! A phantom is built from ellipsoids: one liver, optional organs, and
//! lesions with a per-lesion confidence c. The probability model routes all
//! non-lesion mass at a lesion voxel to the background channel, so with
//! sensitivity factor f a lesion is segmented exactly when f*c > 1-c, i.e.
//! c > 1/(1+f) - an analytically checkable threshold. Decoy blobs put the
//! same confidence pattern into the probability maps without any ground
//! truth behind them, producing false positives on demand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, LabelGrid, ScalarGrid, Spacing};
use crate::labels::ClassLabel;
use crate::prob::ProbMaps;
use crate::reclassify::PatchSegmenter;
use crate::seeds;
use crate::seg2det::extract_lesions;
use crate::shuffle::{Patch, PatchEdit};
use crate::volio::manifest::{CaseManifest, Phase};

/// An axis-aligned ellipsoid: center in voxel coordinates, radii in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: (f64, f64, f64),
    pub radii_mm: (f64, f64, f64),
}

impl Ellipsoid {
    /// Voxel-center inclusion test.
    pub fn contains(&self, z: usize, y: usize, x: usize, spacing: Spacing) -> bool {
        let dz = (z as f64 - self.center.0) * spacing.z / self.radii_mm.0;
        let dy = (y as f64 - self.center.1) * spacing.y / self.radii_mm.1;
        let dx = (x as f64 - self.center.2) * spacing.x / self.radii_mm.2;
        dz * dz + dy * dy + dx * dx <= 1.0
    }

    /// Conservative voxel bounding box, clamped to the grid.
    fn bbox(&self, dims: Dims, spacing: Spacing) -> ((usize, usize, usize), (usize, usize, usize)) {
        let lo = |c: f64, r: f64, s: f64| ((c - r / s).floor().max(0.0)) as usize;
        let hi = |c: f64, r: f64, s: f64, d: usize| {
            ((c + r / s).ceil() as usize).min(d.saturating_sub(1))
        };
        (
            (
                lo(self.center.0, self.radii_mm.0, spacing.z),
                lo(self.center.1, self.radii_mm.1, spacing.y),
                lo(self.center.2, self.radii_mm.2, spacing.x),
            ),
            (
                hi(self.center.0, self.radii_mm.0, spacing.z, dims.z),
                hi(self.center.1, self.radii_mm.1, spacing.y, dims.y),
                hi(self.center.2, self.radii_mm.2, spacing.x, dims.x),
            ),
        )
    }

    fn for_each_inside(
        &self,
        dims: Dims,
        spacing: Spacing,
        mut body: impl FnMut(usize, usize, usize, usize),
    ) {
        let (lo, hi) = self.bbox(dims, spacing);
        for z in lo.0..=hi.0 {
            for y in lo.1..=hi.1 {
                for x in lo.2..=hi.2 {
                    if self.contains(z, y, x, spacing) {
                        body(dims.index(z, y, x), z, y, x);
                    }
                }
            }
        }
    }
}

/// One planted lesion (or decoy blob).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub class: ClassLabel,
    pub shape: Ellipsoid,
    /// Lesion-channel confidence c in (0, 1); the background channel gets
    /// 1-c at the lesion's voxels.
    pub confidence: f64,
    /// Added to the liver base intensity in images.
    pub contrast_hu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub class: ClassLabel,
    pub shape: Ellipsoid,
}

/// Full description of a synthetic case; generation is a pure function of
/// this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub case_id: String,
    pub dims: Dims,
    pub spacing: Spacing,
    pub seed: u64,
    pub phases: Vec<Phase>,
    pub liver: Ellipsoid,
    pub lesions: Vec<LesionSpec>,
    /// Confidence blobs with no ground truth behind them: false-positive
    /// material for the detector.
    pub decoys: Vec<LesionSpec>,
    pub organs: Vec<OrganSpec>,
    /// Uniform image noise amplitude in HU.
    pub noise_hu: f64,
}

const LIVER_HU: f32 = 60.0;
const BACKGROUND_HU: f32 = -1000.0;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidGeometry("phantom dims must be nonzero".into()));
        }
        if self.phases.is_empty() || !self.phases.contains(&Phase::NC) {
            return Err(Error::InvalidGeometry("phantom needs the NC phase".into()));
        }
        for organ in &self.organs {
            if !(8..=13).contains(&organ.class.code()) {
                return Err(Error::InvalidGeometry(format!(
                    "organ ellipsoid has class {}, expected 8..=13",
                    organ.class
                )));
            }
        }
        let all: Vec<&LesionSpec> = self.lesions.iter().chain(&self.decoys).collect();
        for spec in &all {
            if !(spec.confidence > 0.0 && spec.confidence < 1.0) {
                return Err(Error::InvalidGeometry(format!(
                    "lesion confidence {} outside (0, 1)",
                    spec.confidence
                )));
            }
            if !spec.class.is_lesion() {
                return Err(Error::InvalidGeometry(format!(
                    "planted blob has non-lesion class {}",
                    spec.class
                )));
            }
            if !self.lesion_inside_liver(&spec.shape) {
                return Err(Error::InvalidGeometry(format!(
                    "lesion at {:?} not provably inside the liver",
                    spec.shape.center
                )));
            }
        }
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                if !self.separated(&a.shape, &b.shape) {
                    return Err(Error::InvalidGeometry(format!(
                        "lesions at {:?} and {:?} are not separated",
                        a.shape.center, b.shape.center
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sufficient containment test: the lesion's bounding box, inflated by
    /// the center offset, fits inside the liver ellipsoid.
    fn lesion_inside_liver(&self, shape: &Ellipsoid) -> bool {
        let s = self.spacing;
        let l = &self.liver;
        let term = |c: f64, lc: f64, r: f64, lr: f64, sp: f64| {
            (((c - lc).abs() * sp + r) / lr).powi(2)
        };
        term(shape.center.0, l.center.0, shape.radii_mm.0, l.radii_mm.0, s.z)
            + term(shape.center.1, l.center.1, shape.radii_mm.1, l.radii_mm.1, s.y)
            + term(shape.center.2, l.center.2, shape.radii_mm.2, l.radii_mm.2, s.x)
            <= 1.0
    }

    /// Sufficient separation: some axis has a gap of at least 2.5 voxels
    /// between the two ellipsoids, so rasterizations cannot touch or merge.
    fn separated(&self, a: &Ellipsoid, b: &Ellipsoid) -> bool {
        let s = self.spacing;
        let gap = |ca: f64, cb: f64, ra: f64, rb: f64, sp: f64| {
            (ca - cb).abs() * sp - ra - rb >= 2.5 * sp
        };
        gap(a.center.0, b.center.0, a.radii_mm.0, b.radii_mm.0, s.z)
            || gap(a.center.1, b.center.1, a.radii_mm.1, b.radii_mm.1, s.y)
            || gap(a.center.2, b.center.2, a.radii_mm.2, b.radii_mm.2, s.x)
    }
}

/// A generated case: per-phase images, ground-truth mask, probability maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub spec: PhantomSpec,
    pub images: BTreeMap<Phase, ScalarGrid>,
    pub gt_mask: LabelGrid,
    pub prob: ProbMaps,
}

/// Rasterizes a phantom spec into a full case. Pure in the spec: the same
/// spec (including its seed) always yields byte-identical grids.
pub fn generate_case(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let (dims, spacing) = (spec.dims, spec.spacing);
    let n = dims.len();

    // Ground truth: organs, then liver, then lesions on top.
    let mut gt = vec![0u8; n];
    for organ in &spec.organs {
        organ.shape.for_each_inside(dims, spacing, |flat, _, _, _| {
            gt[flat] = organ.class.code();
        });
    }
    spec.liver.for_each_inside(dims, spacing, |flat, _, _, _| {
        gt[flat] = ClassLabel::LIVER.code();
    });
    for lesion in &spec.lesions {
        lesion.shape.for_each_inside(dims, spacing, |flat, _, _, _| {
            gt[flat] = lesion.class.code();
        });
    }

    // Probability channels from the confidence model.
    let mut channels: Vec<Vec<f32>> = vec![vec![0.0; n]; ClassLabel::COUNT];
    channels[0].fill(1.0);
    for (flat, &v) in gt.iter().enumerate() {
        if (7..=13).contains(&v) {
            channels[v as usize][flat] = 0.9;
            channels[0][flat] = 0.1;
        }
    }
    for blob in spec.lesions.iter().chain(&spec.decoys) {
        let c = blob.confidence as f32;
        let class = blob.class.code() as usize;
        blob.shape.for_each_inside(dims, spacing, |flat, _, _, _| {
            channels[ClassLabel::LIVER.code() as usize][flat] = 0.0;
            channels[class][flat] = c;
            channels[0][flat] = 1.0 - c;
        });
    }

    // Images: piecewise-constant anatomy plus seeded uniform noise.
    let mut images = BTreeMap::new();
    for (k, &phase) in spec.phases.iter().enumerate() {
        let mut img = vec![BACKGROUND_HU; n];
        for (flat, &v) in gt.iter().enumerate() {
            img[flat] = match v {
                0 => BACKGROUND_HU,
                7 => LIVER_HU,
                c if (8..=13).contains(&c) => 30.0 + 5.0 * (c - 7) as f32,
                _ => LIVER_HU, // lesion voxels get contrast below
            };
        }
        let enhancement = 8.0 * k as f32;
        for blob in spec.lesions.iter().chain(&spec.decoys) {
            let value = LIVER_HU + blob.contrast_hu as f32
                + if blob.contrast_hu >= 0.0 { enhancement } else { -enhancement };
            blob.shape.for_each_inside(dims, spacing, |flat, _, _, _| {
                img[flat] = value;
            });
        }
        if spec.noise_hu > 0.0 {
            let amp = spec.noise_hu as f32;
            let mut rng =
                ChaCha8Rng::seed_from_u64(seeds::mix(&[spec.seed, phase.tag().len() as u64, k as u64]));
            for v in img.iter_mut() {
                *v += rng.random_range(-amp..=amp);
            }
        }
        images.insert(phase, ScalarGrid::new(dims, spacing, img)?);
    }

    let channels = channels
        .into_iter()
        .map(|data| ScalarGrid::new(dims, spacing, data))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomCase {
        spec: spec.clone(),
        images,
        gt_mask: LabelGrid::new(dims, spacing, gt)?,
        prob: ProbMaps::new(channels)?,
    })
}

impl PhantomCase {
    /// Writes the case as NIfTI files plus a manifest; returns the manifest
    /// path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut phases = BTreeMap::new();
        for (phase, img) in &self.images {
            let name = format!("image_{}.nii.gz", phase.tag());
            crate::volio::nifti::write_scalar(img, dir.join(&name))?;
            phases.insert(*phase, PathBuf::from(name));
        }
        crate::volio::nifti::write_labels(&self.gt_mask, dir.join("gt.nii.gz"))?;
        crate::volio::nifti::write_probmaps(&self.prob, dir.join("prob.nii.gz"))?;
        let manifest = CaseManifest {
            case_id: self.spec.case_id.clone(),
            phases,
            prob: Some(PathBuf::from("prob.nii.gz")),
            gt_mask: Some(PathBuf::from("gt.nii.gz")),
            spacing_mm: None,
        };
        let path = dir.join("manifest.json");
        manifest.save(&path)?;
        Ok(path)
    }
}

/// Default phantom geometry: large enough to hold a 16x128x128 patch.
pub const DEFAULT_DIMS: Dims = Dims { z: 32, y: 160, x: 160 };
pub const DEFAULT_SPACING: Spacing = Spacing { z: 2.5, y: 1.0, x: 1.0 };

/// Confidence values used by random specs; all safely away from the
/// argmax tie points at c = 1/(1+f) for f in {1, 4}.
const CONFIDENCES: [f64; 8] = [0.10, 0.30, 0.35, 0.40, 0.45, 0.60, 0.75, 0.90];

/// Knobs for [`random_spec`].
#[derive(Debug, Clone, Copy)]
pub struct RandomSpecOptions {
    pub dims: Dims,
    pub spacing: Spacing,
    pub with_decoys: bool,
    /// Plant only lesions at or above this confidence; 0.55 makes every
    /// lesion detectable at both f = 1 and f = 4.
    pub min_confidence: f64,
    pub max_lesions: usize,
}

impl Default for RandomSpecOptions {
    fn default() -> Self {
        RandomSpecOptions {
            dims: DEFAULT_DIMS,
            spacing: DEFAULT_SPACING,
            with_decoys: false,
            min_confidence: 0.0,
            max_lesions: 3,
        }
    }
}

/// A random phantom spec with up to `max_lesions` lesions (and optional
/// decoys), suitable for the whole cascade.
pub fn random_spec(master_seed: u64, index: u64, opts: &RandomSpecOptions) -> PhantomSpec {
    let (dims, spacing) = (opts.dims, opts.spacing);
    let seed = seeds::mix(&[master_seed, index, 0x9a27]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent_mm =
        (dims.z as f64 * spacing.z, dims.y as f64 * spacing.y, dims.x as f64 * spacing.x);
    let liver = Ellipsoid {
        center: (dims.z as f64 / 2.0, dims.y as f64 / 2.0, dims.x as f64 / 2.0),
        radii_mm: (
            extent_mm.0 * 0.40 * rng.random_range(0.88..0.98),
            extent_mm.1 * 0.40 * rng.random_range(0.88..0.98),
            extent_mm.2 * 0.40 * rng.random_range(0.88..0.98),
        ),
    };
    let mut spec = PhantomSpec {
        case_id: format!("case_{index:04}"),
        dims,
        spacing,
        seed,
        phases: vec![Phase::NC],
        liver,
        lesions: Vec::new(),
        decoys: Vec::new(),
        organs: Vec::new(),
        noise_hu: 2.0,
    };

    let confidences: Vec<f64> =
        CONFIDENCES.iter().copied().filter(|&c| c >= opts.min_confidence).collect();
    let n_lesions = rng.random_range(0..=opts.max_lesions);
    for _ in 0..n_lesions {
        if let Some(blob) = place_blob(&mut rng, &spec, 1..=6, &confidences) {
            spec.lesions.push(blob);
        }
    }
    if opts.with_decoys {
        let n_decoys = rng.random_range(1..=2usize);
        for _ in 0..n_decoys {
            if let Some(blob) = place_blob(&mut rng, &spec, 1..=3, &confidences) {
                spec.decoys.push(blob);
            }
        }
    }
    debug_assert!(spec.validate().is_ok());
    spec
}

fn place_blob(
    rng: &mut ChaCha8Rng,
    spec: &PhantomSpec,
    classes: std::ops::RangeInclusive<u8>,
    confidences: &[f64],
) -> Option<LesionSpec> {
    let class = ClassLabel::lesion(rng.random_range(classes)).expect("lesion range");
    for _ in 0..40 {
        let radii = (
            rng.random_range(6.0..=10.0),
            rng.random_range(6.0..=11.0),
            rng.random_range(6.0..=11.0),
        );
        let center = (
            spec.liver.center.0
                + rng.random_range(-0.55..0.55) * spec.liver.radii_mm.0 / spec.spacing.z,
            spec.liver.center.1
                + rng.random_range(-0.55..0.55) * spec.liver.radii_mm.1 / spec.spacing.y,
            spec.liver.center.2
                + rng.random_range(-0.55..0.55) * spec.liver.radii_mm.2 / spec.spacing.x,
        );
        let shape = Ellipsoid { center, radii_mm: radii };
        let candidate = LesionSpec {
            class,
            shape,
            confidence: confidences[rng.random_range(0..confidences.len())],
            contrast_hu: rng.random_range(20.0..80.0)
                * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        };
        let clear = spec
            .lesions
            .iter()
            .chain(&spec.decoys)
            .all(|other| spec.separated(&shape, &other.shape));
        if spec.lesion_inside_liver(&shape) && clear {
            return Some(candidate);
        }
    }
    None
}

/// Mock patch segmenters standing in for a trained patch model.
///
/// `Truth` behaves like a perfect model: it returns the case's ground-truth
/// lesion labels inside the patch window, relocating them along transplant
/// edits and erasing them under excisions (it reads the patch's edit
/// provenance, not its reference mask, so detections with no ground truth
/// behind them score zero). `Noisy` is truth with whole instances dropped at
/// a seeded probability; `Null` never finds anything.
pub enum MockSegmenter {
    Truth { gt: LabelGrid },
    Null,
    Noisy { gt: LabelGrid, instance_of: Vec<u32>, p_drop: f64, seed: u64 },
}

/// Perfect patch model for a phantom case.
pub fn truth_segmenter(case: &PhantomCase) -> MockSegmenter {
    MockSegmenter::Truth { gt: case.gt_mask.clone() }
}

pub fn truth_segmenter_from_gt(gt: LabelGrid) -> MockSegmenter {
    MockSegmenter::Truth { gt }
}

/// Patch model that never predicts lesion tissue.
pub fn null_segmenter() -> MockSegmenter {
    MockSegmenter::Null
}

/// Truth with each ground-truth instance dropped independently with
/// probability `p_drop`, seeded per (seed, patch, instance).
pub fn noisy_segmenter(gt: LabelGrid, p_drop: f64, seed: u64) -> Result<MockSegmenter> {
    let instances = extract_lesions(&gt, "noisy", 0.0)?;
    let mut instance_of = vec![0u32; gt.dims().len()];
    for det in &instances.detections {
        for flat in det.mask.iter_indices() {
            instance_of[flat] = det.id;
        }
    }
    Ok(MockSegmenter::Noisy { gt, instance_of, p_drop, seed })
}

fn lesionize(v: u8) -> u8 {
    if (1..=6).contains(&v) {
        v
    } else {
        0
    }
}

impl PatchSegmenter for MockSegmenter {
    fn segment(&self, patch: &Patch) -> Result<LabelGrid> {
        let pdims = patch.dims();
        let spacing = patch.mask.spacing();
        let (gt, keep): (&LabelGrid, Box<dyn Fn(usize) -> bool>) = match self {
            MockSegmenter::Null => {
                return LabelGrid::filled(pdims, spacing, 0);
            }
            MockSegmenter::Truth { gt } => (gt, Box::new(|_| true)),
            MockSegmenter::Noisy { gt, instance_of, p_drop, seed } => {
                let p = *p_drop;
                let s = *seed;
                let patch_seed = patch.rng_seed;
                let inst = instance_of.clone();
                (
                    gt,
                    Box::new(move |flat: usize| {
                        let id = inst[flat];
                        if id == 0 || p <= 0.0 {
                            return true;
                        }
                        if p >= 1.0 {
                            return false;
                        }
                        let h = seeds::mix(&[s, patch_seed, id as u64]);
                        (h as f64 / u64::MAX as f64) >= p
                    }),
                )
            }
        };
        let dims = gt.dims();
        if patch.origin.0 + pdims.z > dims.z
            || patch.origin.1 + pdims.y > dims.y
            || patch.origin.2 + pdims.x > dims.x
        {
            return Err(Error::InvalidGeometry(format!(
                "patch at {:?} exceeds phantom dims {:?}",
                patch.origin, dims
            )));
        }
        let mut out = vec![0u8; pdims.len()];
        let mut local = 0usize;
        for z in 0..pdims.z {
            for y in 0..pdims.y {
                for x in 0..pdims.x {
                    let case_flat = dims.index(
                        z + patch.origin.0,
                        y + patch.origin.1,
                        x + patch.origin.2,
                    );
                    let v = lesionize(gt.data()[case_flat]);
                    if v != 0 && keep(case_flat) {
                        out[local] = v;
                    }
                    local += 1;
                }
            }
        }
        match &patch.edit {
            PatchEdit::None => {}
            PatchEdit::Transplant { offset } => {
                // Transplanted tissue looks like its source: relocate GT.
                for (local, &m) in patch.mask.data().iter().enumerate() {
                    if m == 0 {
                        continue;
                    }
                    let (z, y, x) = pdims.coords(local);
                    let dest = (
                        (z + patch.origin.0) as i64 - offset.0,
                        (y + patch.origin.1) as i64 - offset.1,
                        (x + patch.origin.2) as i64 - offset.2,
                    );
                    let src = dims.index(dest.0 as usize, dest.1 as usize, dest.2 as usize);
                    let v = lesionize(gt.data()[src]);
                    out[local] = if v != 0 && keep(src) { v } else { 0 };
                }
            }
            PatchEdit::Excise { voxels, .. } => {
                // Excised voxels now hold normal liver texture.
                for flat in voxels.iter_indices() {
                    out[flat] = 0;
                }
            }
        }
        LabelGrid::new(pdims, spacing, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensitivity::{argmax_mask_scaled, SensitivityFactor};
    use crate::shuffle::{
        sample_lesion_patch, transplant, ShuffleConfig, ShuffleContext,
    };

    fn small_dims() -> (Dims, Spacing) {
        (Dims::new(24, 64, 64), Spacing { z: 2.5, y: 1.5, x: 1.5 })
    }

    fn one_lesion_spec(confidence: f64) -> PhantomSpec {
        let (dims, spacing) = small_dims();
        PhantomSpec {
            case_id: "p0".into(),
            dims,
            spacing,
            seed: 77,
            phases: vec![Phase::NC],
            liver: Ellipsoid {
                center: (12.0, 32.0, 32.0),
                radii_mm: (24.0, 40.0, 40.0),
            },
            lesions: vec![LesionSpec {
                class: ClassLabel::HCC,
                shape: Ellipsoid { center: (12.0, 32.0, 32.0), radii_mm: (7.0, 8.0, 8.0) },
                confidence,
                contrast_hu: 40.0,
            }],
            decoys: vec![],
            organs: vec![],
            noise_hu: 2.0,
        }
    }

    #[test]
    fn same_seed_identical_case() {
        let spec = one_lesion_spec(0.6);
        let a = generate_case(&spec).unwrap();
        let b = generate_case(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn confidence_thresholds_against_argmax() {
        // c = 0.6: lesion wins at f = 1 (0.6 > 0.4).
        let case = generate_case(&one_lesion_spec(0.6)).unwrap();
        let mask = argmax_mask_scaled(&case.prob, SensitivityFactor::base());
        let lesion_voxels = mask.data().iter().filter(|&&v| v == 1).count();
        let gt_voxels = case.gt_mask.data().iter().filter(|&&v| v == 1).count();
        assert_eq!(lesion_voxels, gt_voxels);
        assert!(gt_voxels > 0);

        // c = 0.21: background at f = 1 but lesion at f = 4 (0.84 > 0.79).
        let weak = generate_case(&one_lesion_spec(0.21)).unwrap();
        let base = argmax_mask_scaled(&weak.prob, SensitivityFactor::base());
        assert_eq!(base.data().iter().filter(|&&v| v == 1).count(), 0);
        let high = argmax_mask_scaled(&weak.prob, SensitivityFactor::new(4.0).unwrap());
        assert_eq!(high.data().iter().filter(|&&v| v == 1).count(), gt_voxels_of(&weak));
    }

    fn gt_voxels_of(case: &PhantomCase) -> usize {
        case.gt_mask.data().iter().filter(|&&v| (1..=6).contains(&v)).count()
    }

    #[test]
    fn extraction_recovers_planted_lesions() {
        let (dims, spacing) = small_dims();
        let opts = RandomSpecOptions { dims, spacing, ..RandomSpecOptions::default() };
        for index in 0..12u64 {
            let spec = random_spec(0xbeef, index, &opts);
            let case = generate_case(&spec).unwrap();
            let dets = extract_lesions(&case.gt_mask, &spec.case_id, 0.5).unwrap();
            assert_eq!(dets.len(), spec.lesions.len(), "case {index}");
            // Oracle: rasterize each planted ellipsoid independently.
            let mut planted: Vec<(u8, usize)> = spec
                .lesions
                .iter()
                .map(|l| {
                    let mut count = 0usize;
                    for z in 0..dims.z {
                        for y in 0..dims.y {
                            for x in 0..dims.x {
                                if l.shape.contains(z, y, x, spacing) {
                                    count += 1;
                                }
                            }
                        }
                    }
                    (l.class.code(), count)
                })
                .collect();
            let mut got: Vec<(u8, usize)> =
                dets.detections.iter().map(|d| (d.label.code(), d.voxel_count)).collect();
            planted.sort();
            got.sort();
            assert_eq!(got, planted, "case {index}");
        }
    }

    #[test]
    fn decoys_absent_from_gt_but_present_in_prob() {
        let mut spec = one_lesion_spec(0.6);
        spec.decoys.push(LesionSpec {
            class: ClassLabel::META,
            shape: Ellipsoid { center: (12.0, 18.0, 32.0), radii_mm: (6.0, 7.0, 7.0) },
            confidence: 0.6,
            contrast_hu: 30.0,
        });
        let case = generate_case(&spec).unwrap();
        assert_eq!(case.gt_mask.data().iter().filter(|&&v| v == 3).count(), 0);
        let mask = argmax_mask_scaled(&case.prob, SensitivityFactor::base());
        assert!(mask.data().iter().filter(|&&v| v == 3).count() > 0);
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        let mut outside = one_lesion_spec(0.6);
        outside.lesions[0].shape.center = (2.0, 4.0, 4.0);
        assert!(outside.validate().is_err());

        let mut bad_conf = one_lesion_spec(0.6);
        bad_conf.lesions[0].confidence = 1.0;
        assert!(bad_conf.validate().is_err());

        let mut touching = one_lesion_spec(0.6);
        touching.lesions.push(touching.lesions[0]);
        assert!(touching.validate().is_err());
    }

    fn shuffle_ctx(case: &PhantomCase) -> ShuffleContext {
        let dets = extract_lesions(&case.gt_mask, &case.spec.case_id, 0.5).unwrap();
        let cfg = ShuffleConfig {
            patch_dims: Dims { z: 8, y: 32, x: 32 },
            ..ShuffleConfig::default()
        };
        ShuffleContext::new(
            case.images.iter().map(|(p, g)| (*p, g.clone())).collect(),
            case.gt_mask.clone(),
            dets,
            cfg,
        )
        .unwrap()
    }

    #[test]
    fn truth_segmenter_reproduces_reference_masks() {
        let case = generate_case(&one_lesion_spec(0.6)).unwrap();
        let ctx = shuffle_ctx(&case);
        let det = ctx.detections.detections[0].clone();
        let seg = truth_segmenter(&case);

        let orig = sample_lesion_patch(&ctx, &det, 5).unwrap();
        assert_eq!(seg.segment(&orig).unwrap(), orig.mask);

        let shuf = transplant(&ctx, &det, 6).unwrap();
        assert!(!shuf.fallback);
        assert_eq!(seg.segment(&shuf).unwrap(), shuf.mask);
    }

    #[test]
    fn truth_segmenter_scores_exact_lesion_volume() {
        use crate::reclassify::{score_lesion, ReclassifyConfig};
        let case = generate_case(&one_lesion_spec(0.6)).unwrap();
        let ctx = shuffle_ctx(&case);
        let det = ctx.detections.detections[0].clone();
        let seg = truth_segmenter(&case);
        let score =
            score_lesion(&ctx, &det, &seg, &ReclassifyConfig::default(), 4).unwrap();
        assert!((score - det.volume_cm3).abs() < 1e-9, "score {score} vs {}", det.volume_cm3);
    }

    #[test]
    fn liver_mask_matches_rasterized_liver_minus_lesions() {
        let spec = one_lesion_spec(0.6);
        let case = generate_case(&spec).unwrap();
        let liver = crate::seg2det::extract_liver_mask(&case.gt_mask);
        let got = liver.data().iter().filter(|&&v| v != 0).count();
        let mut expected = 0usize;
        for z in 0..spec.dims.z {
            for y in 0..spec.dims.y {
                for x in 0..spec.dims.x {
                    let in_liver = spec.liver.contains(z, y, x, spec.spacing);
                    let in_lesion = spec
                        .lesions
                        .iter()
                        .any(|l| l.shape.contains(z, y, x, spec.spacing));
                    if in_liver && !in_lesion {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn organs_rendered_and_validated() {
        let mut spec = one_lesion_spec(0.6);
        spec.organs.push(OrganSpec {
            class: ClassLabel::SPLEEN,
            shape: Ellipsoid { center: (4.0, 8.0, 8.0), radii_mm: (6.0, 8.0, 8.0) },
        });
        let case = generate_case(&spec).unwrap();
        let spleen_voxels = case.gt_mask.data().iter().filter(|&&v| v == 11).count();
        assert!(spleen_voxels > 0);
        let ch = case.prob.channel(ClassLabel::SPLEEN);
        assert!(ch.data().iter().any(|&v| v == 0.9));

        spec.organs[0].class = ClassLabel::HCC;
        assert!(spec.validate().is_err(), "lesion classes are not organs");
    }

    #[test]
    fn null_segmenter_is_empty_and_noisy_limits() {
        let case = generate_case(&one_lesion_spec(0.6)).unwrap();
        let ctx = shuffle_ctx(&case);
        let det = ctx.detections.detections[0].clone();
        let patch = sample_lesion_patch(&ctx, &det, 9).unwrap();

        let null = null_segmenter();
        assert!(null.segment(&patch).unwrap().data().iter().all(|&v| v == 0));

        let all_dropped = noisy_segmenter(case.gt_mask.clone(), 1.0, 3).unwrap();
        assert_eq!(all_dropped.segment(&patch).unwrap(), null.segment(&patch).unwrap());

        let none_dropped = noisy_segmenter(case.gt_mask.clone(), 0.0, 3).unwrap();
        let truth = truth_segmenter(&case);
        assert_eq!(none_dropped.segment(&patch).unwrap(), truth.segment(&patch).unwrap());
    }

    #[test]
    fn write_and_reload_case() {
        let case = generate_case(&one_lesion_spec(0.6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = case.write(dir.path()).unwrap();
        let manifest = CaseManifest::load(&manifest_path).unwrap();
        assert_eq!(manifest.case_id, "p0");
        let gt = crate::volio::nifti::read_volume(manifest.gt_mask.as_ref().unwrap())
            .unwrap()
            .into_labels()
            .unwrap();
        assert_eq!(gt, case.gt_mask);
        let prob = crate::volio::nifti::read_probmaps(manifest.prob.as_ref().unwrap()).unwrap();
        assert_eq!(prob, case.prob);
    }

    #[test]
    fn random_specs_always_valid() {
        let (dims, spacing) = small_dims();
        let opts = RandomSpecOptions {
            dims,
            spacing,
            with_decoys: true,
            ..RandomSpecOptions::default()
        };
        for index in 0..30u64 {
            let spec = random_spec(42, index, &opts);
            spec.validate().unwrap();
            for lesion in &spec.lesions {
                assert!(lesion.confidence > 0.0 && lesion.confidence < 1.0);
            }
        }
        let confident = RandomSpecOptions { min_confidence: 0.55, ..opts };
        for index in 0..10u64 {
            let spec = random_spec(43, index, &confident);
            for lesion in spec.lesions.iter().chain(&spec.decoys) {
                assert!(lesion.confidence >= 0.55);
            }
        }
    }
}
