//! Pairing of two detection sets and TP / FL / FP / FN bookkeeping.
//!
//! Candidate pairs are every (gt, pred) couple sharing at least
//! `min_overlap_voxels`; assignment is greedy in descending intersection
//! order with deterministic tie-breaking, one-to-one on both sides. A pair
//! with matching labels is a true positive, with different labels a false
//! label (counted on both the GT side and the prediction side); leftovers are
//! false negatives / false positives.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::labels::ClassLabel;
use crate::seg2det::{Detection, DetectionSet};

/// One matched (gt, pred) couple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gt_id: u32,
    pub pred_id: u32,
    pub intersection_voxels: usize,
    pub intersection_cm3: f64,
    pub same_label: bool,
}

/// Instance-outcome counts for one lesion class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTally {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    /// GT instances matched under a different predicted label.
    pub fl_gt: usize,
    /// Predicted instances matched to a GT of a different label.
    pub fl_pred: usize,
}

impl ClassTally {
    fn add(&mut self, other: &ClassTally) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.fp += other.fp;
        self.fl_gt += other.fl_gt;
        self.fl_pred += other.fl_pred;
    }
}

/// Full pairing between a GT and a prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub case_id: String,
    pub pairs: Vec<MatchedPair>,
    /// GT ids without a partner (false negatives).
    pub unmatched_gt: Vec<u32>,
    /// Prediction ids without a partner (false positives).
    pub unmatched_pred: Vec<u32>,
    /// Tallies indexed by lesion class code 1..=6.
    pub tallies: [ClassTally; 6],
}

impl MatchReport {
    pub fn tally(&self, label: ClassLabel) -> &ClassTally {
        &self.tallies[(label.code() - 1) as usize]
    }

    /// Sum over all six classes.
    pub fn total(&self) -> ClassTally {
        let mut t = ClassTally::default();
        for c in &self.tallies {
            t.add(c);
        }
        t
    }

    /// Sum over the malignant classes (HCC, ICC, Meta).
    pub fn malignant(&self) -> ClassTally {
        let mut t = ClassTally::default();
        for c in &self.tallies[..3] {
            t.add(c);
        }
        t
    }

    /// Element-wise accumulation across cases.
    pub fn accumulate(tallies: &mut [ClassTally; 6], report: &MatchReport) {
        for (acc, t) in tallies.iter_mut().zip(&report.tallies) {
            acc.add(t);
        }
    }
}

struct Candidate {
    overlap: usize,
    gt_id: u32,
    pred_id: u32,
    gt_idx: usize,
    pred_idx: usize,
}

fn candidates(
    gt: &DetectionSet,
    pred: &DetectionSet,
    min_overlap_voxels: usize,
) -> Vec<Candidate> {
    let floor = min_overlap_voxels.max(1);
    let mut out = Vec::new();
    for (gi, g) in gt.detections.iter().enumerate() {
        for (pi, p) in pred.detections.iter().enumerate() {
            if !g.bbox.overlaps(&p.bbox) {
                continue;
            }
            let overlap = g.mask.intersection_voxels(&p.mask);
            if overlap >= floor {
                out.push(Candidate {
                    overlap,
                    gt_id: g.id,
                    pred_id: p.id,
                    gt_idx: gi,
                    pred_idx: pi,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.overlap.cmp(&a.overlap).then(a.gt_id.cmp(&b.gt_id)).then(a.pred_id.cmp(&b.pred_id))
    });
    out
}

struct Pairing {
    /// (gt index, pred index, overlap voxels)
    assigned: Vec<(usize, usize, usize)>,
    free_gt: Vec<usize>,
    free_pred: Vec<usize>,
}

fn greedy_pairing(gt: &DetectionSet, pred: &DetectionSet, min_overlap_voxels: usize) -> Pairing {
    let mut used_gt = vec![false; gt.detections.len()];
    let mut used_pred = vec![false; pred.detections.len()];
    let mut assigned = Vec::new();
    for c in candidates(gt, pred, min_overlap_voxels) {
        if !used_gt[c.gt_idx] && !used_pred[c.pred_idx] {
            used_gt[c.gt_idx] = true;
            used_pred[c.pred_idx] = true;
            assigned.push((c.gt_idx, c.pred_idx, c.overlap));
        }
    }
    Pairing {
        assigned,
        free_gt: (0..gt.detections.len()).filter(|&i| !used_gt[i]).collect(),
        free_pred: (0..pred.detections.len()).filter(|&i| !used_pred[i]).collect(),
    }
}

/// Pairs a ground-truth set against a prediction set.
pub fn match_sets(
    gt: &DetectionSet,
    pred: &DetectionSet,
    min_overlap_voxels: usize,
) -> Result<MatchReport> {
    gt.same_geometry(pred)?;
    let voxel_cm3 = gt.spacing.voxel_volume_cm3();
    let pairing = greedy_pairing(gt, pred, min_overlap_voxels);

    let mut tallies = [ClassTally::default(); 6];
    let slot = |label: ClassLabel| (label.code() - 1) as usize;
    let mut pairs = Vec::with_capacity(pairing.assigned.len());
    for &(gi, pi, overlap) in &pairing.assigned {
        let (g, p) = (&gt.detections[gi], &pred.detections[pi]);
        let same_label = g.label == p.label;
        if same_label {
            tallies[slot(g.label)].tp += 1;
        } else {
            tallies[slot(g.label)].fl_gt += 1;
            tallies[slot(p.label)].fl_pred += 1;
        }
        pairs.push(MatchedPair {
            gt_id: g.id,
            pred_id: p.id,
            intersection_voxels: overlap,
            intersection_cm3: overlap as f64 * voxel_cm3,
            same_label,
        });
    }
    pairs.sort_by_key(|p| (p.gt_id, p.pred_id));

    let mut unmatched_gt = Vec::new();
    for &gi in &pairing.free_gt {
        let g = &gt.detections[gi];
        tallies[slot(g.label)].fn_ += 1;
        unmatched_gt.push(g.id);
    }
    let mut unmatched_pred = Vec::new();
    for &pi in &pairing.free_pred {
        let p = &pred.detections[pi];
        tallies[slot(p.label)].fp += 1;
        unmatched_pred.push(p.id);
    }
    unmatched_gt.sort_unstable();
    unmatched_pred.sort_unstable();

    Ok(MatchReport {
        case_id: gt.case_id.clone(),
        pairs,
        unmatched_gt,
        unmatched_pred,
        tallies,
    })
}

fn rebuild_set(template: &DetectionSet, mut dets: Vec<Detection>) -> DetectionSet {
    dets.sort_by_key(|d| (d.label.code(), d.mask.first_index().unwrap_or(usize::MAX)));
    for (i, d) in dets.iter_mut().enumerate() {
        d.id = (i + 1) as u32;
    }
    DetectionSet {
        case_id: template.case_id.clone(),
        dims: template.dims,
        spacing: template.spacing,
        detections: dets,
    }
}

/// Splits two prediction runs into a consensus set and a difference set.
///
/// An instance of `a` lands in the consensus set when it pairs with a
/// same-label instance of `b`. Everything else goes to the difference set:
/// unpaired instances of either side and both members of a pair whose labels
/// disagree. When an unpaired `a` instance spatially overlaps a same-label
/// `b` instance already routed to the difference set, only the `b` side
/// (the higher-sensitivity run) is kept, so the same region is not reported
/// twice.
pub fn match_predictions(
    a: &DetectionSet,
    b: &DetectionSet,
) -> Result<(DetectionSet, DetectionSet)> {
    a.same_geometry(b)?;
    let pairing = greedy_pairing(a, b, 1);

    let mut same = Vec::new();
    let mut diff_a: Vec<&Detection> = Vec::new();
    let mut diff_b: Vec<&Detection> = Vec::new();
    for &(ai, bi, _) in &pairing.assigned {
        let (da, db) = (&a.detections[ai], &b.detections[bi]);
        if da.label == db.label {
            same.push(da.clone());
        } else {
            diff_a.push(da);
            diff_b.push(db);
        }
    }
    for &ai in &pairing.free_gt {
        diff_a.push(&a.detections[ai]);
    }
    for &bi in &pairing.free_pred {
        diff_b.push(&b.detections[bi]);
    }

    let mut diff: Vec<Detection> = diff_b.iter().map(|d| (*d).clone()).collect();
    for da in diff_a {
        let duplicated = diff_b.iter().any(|db| {
            db.label == da.label && da.mask.intersection_voxels(&db.mask) > 0
        });
        if !duplicated {
            diff.push(da.clone());
        }
    }

    Ok((rebuild_set(a, same), rebuild_set(a, diff)))
}
