//! Lesion reclassification: scoring detections with a patch segmenter over
//! shuffle-augmented patches, discarding weak ones, and correcting labels.
//!
//! For each detection at most `n_patches` inference patches are produced and
//! segmented. The patch's reference mask and the segmenter output are both
//! binarized (any lesion label counts as foreground); the per-patch overlap
//! volume in cm3 is averaged into the lesion's score. A score below the
//! discard threshold removes the detection; survivors can be relabeled by
//! volume voting over the same patch predictions, restricted to the lesion's
//! own footprint. Lesions above the skip volume bypass the whole process,
//! and a lesion whose scoring fails on an infrastructure error is retained
//! with a record - a detector must not silently drop lesions.

use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::labels::{priority_max, ClassLabel};
use crate::seeds;
use crate::seg2det::{Detection, DetectionSet};
use crate::shuffle::{make_inference_patches, write_patch_bundle, Patch, ShuffleContext};

/// Segments a patch's image grids into lesion labels (0-6) at patch dims.
///
/// Implementations must be pure for fixed inputs: the same patch yields the
/// same mask. The engine never calls one instance concurrently - scoring is
/// sequential within a case and each case constructs its own segmenter -
/// but `reentrant` lets an implementation declare whether sharing across
/// threads would be safe.
pub trait PatchSegmenter: Send + Sync {
    fn segment(&self, patch: &Patch) -> Result<LabelGrid>;

    fn reentrant(&self) -> bool {
        true
    }
}

/// Tuning knobs of the reclassification stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReclassifyConfig {
    /// Inference patches per lesion.
    pub n_patches: usize,
    /// Mean overlap below this many cm3 discards the lesion.
    pub discard_threshold_cm3: f64,
    /// Lesions larger than this pass through untouched.
    pub skip_volume_cm3: f64,
    /// Volume-based label voting for survivors.
    pub relabel_voting: bool,
    /// Use shuffled positives among inference patches; off reproduces the
    /// no-lesion-shuffle ablation.
    pub shuffle_in_inference: bool,
}

impl Default for ReclassifyConfig {
    fn default() -> Self {
        ReclassifyConfig {
            n_patches: 10,
            discard_threshold_cm3: 0.5,
            skip_volume_cm3: 64.0,
            relabel_voting: true,
            shuffle_in_inference: true,
        }
    }
}

impl ReclassifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patches == 0 {
            return Err(Error::InvalidGeometry("n_patches must be positive".into()));
        }
        for (name, v) in [
            ("discard_threshold_cm3", self.discard_threshold_cm3),
            ("skip_volume_cm3", self.skip_volume_cm3),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidGeometry(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_contract(patch: &Patch, pred: &LabelGrid) -> Result<()> {
    if pred.dims() != patch.dims() {
        return Err(Error::ContractViolation(format!(
            "segmenter returned {:?}, patch is {:?}",
            pred.dims(),
            patch.dims()
        )));
    }
    if let Some(&v) = pred.data().iter().find(|&&v| v > 6) {
        return Err(Error::ContractViolation(format!(
            "segmenter emitted label {v}, patch models produce 0-6"
        )));
    }
    Ok(())
}

struct PatchScores {
    overlap_voxels: u64,
    /// Predicted voxels per lesion class inside the reference footprint.
    class_voxels: [u64; 6],
}

fn score_patch(patch: &Patch, pred: &LabelGrid) -> PatchScores {
    let mut overlap = 0u64;
    let mut class_voxels = [0u64; 6];
    for (&m, &p) in patch.mask.data().iter().zip(pred.data()) {
        if m != 0 && (1..=6).contains(&p) {
            overlap += 1;
            class_voxels[(p - 1) as usize] += 1;
        }
    }
    PatchScores { overlap_voxels: overlap, class_voxels }
}

fn lesion_seed(master: u64, case_id: &str, lesion_id: u32) -> u64 {
    seeds::mix(&[master, seeds::word(case_id), lesion_id as u64, 0x7ec15])
}

fn run_patches(
    ctx: &ShuffleContext,
    det: &Detection,
    segmenter: &dyn PatchSegmenter,
    cfg: &ReclassifyConfig,
    seed: u64,
) -> Result<(f64, [u64; 6])> {
    let patches = make_inference_patches(
        ctx,
        det,
        cfg.n_patches,
        cfg.shuffle_in_inference,
        lesion_seed(seed, &ctx.case_id, det.id),
    )?;
    let voxel_cm3 = ctx.labels.spacing().voxel_volume_cm3();
    let mut sum_cm3 = 0.0f64;
    let mut votes = [0u64; 6];
    for patch in &patches {
        let pred = segmenter.segment(patch)?;
        check_contract(patch, &pred)?;
        let s = score_patch(patch, &pred);
        sum_cm3 += s.overlap_voxels as f64 * voxel_cm3;
        for (acc, v) in votes.iter_mut().zip(s.class_voxels) {
            *acc += v;
        }
    }
    Ok((sum_cm3 / patches.len() as f64, votes))
}

/// Mean binarized-overlap volume of one lesion over its inference patches.
pub fn score_lesion(
    ctx: &ShuffleContext,
    det: &Detection,
    segmenter: &dyn PatchSegmenter,
    cfg: &ReclassifyConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    run_patches(ctx, det, segmenter, cfg, seed).map(|(score, _)| score)
}

/// Volume-based label vote over patch predictions, restricted to the
/// lesion's reference footprint. Ties go to the higher-priority class; an
/// all-zero vote keeps the original label.
pub fn relabel_vote(
    lesion: &Detection,
    patch_predictions: &[(&Patch, &LabelGrid)],
) -> ClassLabel {
    let mut votes = [0u64; 6];
    for (patch, pred) in patch_predictions {
        let s = score_patch(patch, pred);
        for (acc, v) in votes.iter_mut().zip(s.class_voxels) {
            *acc += v;
        }
    }
    vote_winner(&votes).unwrap_or(lesion.label)
}

fn vote_winner(votes: &[u64; 6]) -> Option<ClassLabel> {
    let max = *votes.iter().max().expect("six classes");
    if max == 0 {
        return None;
    }
    let tied = (1..=6u8)
        .filter(|&c| votes[(c - 1) as usize] == max)
        .map(|c| ClassLabel::lesion(c).expect("lesion code"));
    Some(priority_max(tied).expect("nonempty tie set"))
}

/// What happened to one detection during reclassification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "action")]
pub enum LesionAction {
    /// Scored at or above the threshold.
    Kept,
    /// Scored below the threshold and removed.
    Removed,
    /// Above the skip volume; passed through unscored.
    SkippedLarge,
    /// Scoring failed; retained unchanged (fail-open).
    RetainedOnError { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub id: u32,
    #[serde(flatten)]
    pub action: LesionAction,
    pub score_cm3: Option<f64>,
    /// Present when voting changed the label.
    pub relabeled_to: Option<ClassLabel>,
}

/// A reclassified set plus the per-lesion audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct ReclassifyOutcome {
    pub set: DetectionSet,
    pub records: Vec<LesionRecord>,
}

impl ReclassifyOutcome {
    pub fn removed_ids(&self) -> Vec<u32> {
        self.records
            .iter()
            .filter(|r| matches!(r.action, LesionAction::Removed))
            .map(|r| r.id)
            .collect()
    }
}

/// Runs the full reclassification pass over a detection set.
pub fn reclassify_set(
    dets: &DetectionSet,
    ctx: &ShuffleContext,
    segmenter: &dyn PatchSegmenter,
    cfg: &ReclassifyConfig,
    seed: u64,
) -> Result<ReclassifyOutcome> {
    cfg.validate()?;
    if dets.dims != ctx.dims() {
        return Err(Error::DimsMismatch { left: dets.dims, right: ctx.dims() });
    }
    let mut survivors = Vec::new();
    let mut records = Vec::new();
    for det in &dets.detections {
        if det.volume_cm3 > cfg.skip_volume_cm3 {
            survivors.push(det.clone());
            records.push(LesionRecord {
                id: det.id,
                action: LesionAction::SkippedLarge,
                score_cm3: None,
                relabeled_to: None,
            });
            continue;
        }
        match run_patches(ctx, det, segmenter, cfg, seed) {
            Err(e) => {
                survivors.push(det.clone());
                records.push(LesionRecord {
                    id: det.id,
                    action: LesionAction::RetainedOnError { error: e.to_string() },
                    score_cm3: None,
                    relabeled_to: None,
                });
            }
            Ok((score, votes)) => {
                if score < cfg.discard_threshold_cm3 {
                    records.push(LesionRecord {
                        id: det.id,
                        action: LesionAction::Removed,
                        score_cm3: Some(score),
                        relabeled_to: None,
                    });
                    continue;
                }
                let mut kept = det.clone();
                kept.score_cm3 = Some(score);
                let mut relabeled_to = None;
                if cfg.relabel_voting {
                    if let Some(winner) = vote_winner(&votes) {
                        if winner != kept.label {
                            relabeled_to = Some(winner);
                        }
                        kept.label = winner;
                    }
                }
                survivors.push(kept);
                records.push(LesionRecord {
                    id: det.id,
                    action: LesionAction::Kept,
                    score_cm3: Some(score),
                    relabeled_to,
                });
            }
        }
    }
    Ok(ReclassifyOutcome {
        set: DetectionSet {
            case_id: dets.case_id.clone(),
            dims: dets.dims,
            spacing: dets.spacing,
            detections: survivors,
        },
        records,
    })
}

/// Which segmenter the CLI should construct.
#[derive(Debug, Clone, PartialEq)]
pub enum SegmenterKind {
    MockTruth,
    MockNull,
    MockNoisy(f64),
    Exec(Vec<String>),
}

impl std::str::FromStr for SegmenterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("exec:") {
            let parts: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
            if parts.is_empty() {
                return Err(Error::ContractViolation("exec: needs a command".into()));
            }
            return Ok(SegmenterKind::Exec(parts));
        }
        match s {
            "mock:truth" => Ok(SegmenterKind::MockTruth),
            "mock:null" => Ok(SegmenterKind::MockNull),
            other => match other.strip_prefix("mock:noisy:") {
                Some(p) => {
                    let p: f64 = p.parse().map_err(|_| {
                        Error::ContractViolation(format!("bad drop probability in `{other}`"))
                    })?;
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::ContractViolation(format!(
                            "drop probability {p} outside [0, 1]"
                        )));
                    }
                    Ok(SegmenterKind::MockNoisy(p))
                }
                None => Err(Error::ContractViolation(format!(
                    "unknown segmenter `{other}` (mock:truth | mock:null | mock:noisy:<p> | exec:<cmd>)"
                ))),
            },
        }
    }
}

/// Runs an external command per patch over the bundle protocol: the bundle
/// is written to a fresh temp directory, the command is invoked with that
/// path, and `pred_mask.nii.gz` is read back. A nonzero exit or a missing
/// or malformed output is a contract violation.
pub struct ExecSegmenter {
    program: PathBuf,
    args: Vec<String>,
}

impl ExecSegmenter {
    pub fn new(cmd: &[String]) -> Result<Self> {
        let (program, args) = cmd.split_first().ok_or_else(|| {
            Error::ContractViolation("exec segmenter needs a command".into())
        })?;
        Ok(ExecSegmenter { program: PathBuf::from(program), args: args.to_vec() })
    }
}

impl PatchSegmenter for ExecSegmenter {
    fn segment(&self, patch: &Patch) -> Result<LabelGrid> {
        let dir = tempfile::tempdir()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        write_patch_bundle(patch, dir.path())?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(dir.path())
            .status()
            .map_err(|e| {
                Error::ContractViolation(format!(
                    "failed to spawn `{}`: {e}",
                    self.program.display()
                ))
            })?;
        if !status.success() {
            return Err(Error::ContractViolation(format!(
                "`{}` exited with {status}",
                self.program.display()
            )));
        }
        let out = dir.path().join("pred_mask.nii.gz");
        let pred = crate::volio::nifti::read_volume(&out)
            .map_err(|e| Error::ContractViolation(format!("reading pred_mask.nii.gz: {e}")))?
            .into_labels()
            .map_err(|e| Error::ContractViolation(format!("pred_mask.nii.gz: {e}")))?;
        Ok(pred)
    }
}
