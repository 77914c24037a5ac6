//! Lesion-level and patient-level evaluation.
//!
//! Two lesion-metric modes are reported side by side. In strict mode a false
//! label hurts only precision: recall = TP/(TP+FN). In table-consistent mode
//! false labels also enter the recall denominator - recall = TP/(TP+FN+FL) -
//! and recall-rough counts a detection as a hit regardless of the predicted
//! type: (TP+FL)/(TP+FN+FL). Precision is TP/(TP+FP+FL) with the
//! prediction-side FL count in both modes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{priority_max, ClassLabel};
use crate::matcher::{ClassTally, MatchReport};
use crate::seg2det::DetectionSet;

/// Which recall definition a metrics row uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsMode {
    Strict,
    TableConsistent,
}

impl std::str::FromStr for MetricsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(MetricsMode::Strict),
            "table" | "table-consistent" => Ok(MetricsMode::TableConsistent),
            other => Err(Error::Classification(format!(
                "unknown metrics mode `{other}` (use strict or table)"
            ))),
        }
    }
}

/// Row identity in a metrics table: one lesion class or an aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowClass {
    Class(ClassLabel),
    All,
    Malig,
}

impl RowClass {
    pub fn name(&self) -> &'static str {
        match self {
            RowClass::Class(l) => l.name(),
            RowClass::All => "All",
            RowClass::Malig => "Malig",
        }
    }
}

impl Serialize for RowClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for RowClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        match name.as_str() {
            "All" => Ok(RowClass::All),
            "Malig" => Ok(RowClass::Malig),
            other => ClassLabel::lesions()
                .find(|l| l.name() == other)
                .map(RowClass::Class)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown row class `{other}`"))),
        }
    }
}

/// One line of the lesion-level table. Ratios are `None` when their
/// denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMetricsRow {
    pub class: RowClass,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub fl_gt: usize,
    pub fl_pred: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub recall_rough: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn row_from_tally(class: RowClass, t: &ClassTally, mode: MetricsMode) -> LesionMetricsRow {
    let recall = match mode {
        MetricsMode::Strict => ratio(t.tp, t.tp + t.fn_),
        MetricsMode::TableConsistent => ratio(t.tp, t.tp + t.fn_ + t.fl_gt),
    };
    LesionMetricsRow {
        class,
        tp: t.tp,
        fn_: t.fn_,
        fp: t.fp,
        fl_gt: t.fl_gt,
        fl_pred: t.fl_pred,
        precision: ratio(t.tp, t.tp + t.fp + t.fl_pred),
        recall,
        recall_rough: ratio(t.tp + t.fl_gt, t.tp + t.fn_ + t.fl_gt),
    }
}

/// Builds the per-class + All + Malig rows from aggregate tallies.
pub fn lesion_metrics_from_tallies(
    tallies: &[ClassTally; 6],
    mode: MetricsMode,
) -> Vec<LesionMetricsRow> {
    let mut rows: Vec<LesionMetricsRow> = ClassLabel::lesions()
        .map(|l| row_from_tally(RowClass::Class(l), &tallies[(l.code() - 1) as usize], mode))
        .collect();
    let mut all = ClassTally::default();
    let mut malig = ClassTally::default();
    for (i, t) in tallies.iter().enumerate() {
        all.tp += t.tp;
        all.fn_ += t.fn_;
        all.fp += t.fp;
        all.fl_gt += t.fl_gt;
        all.fl_pred += t.fl_pred;
        if i < 3 {
            malig.tp += t.tp;
            malig.fn_ += t.fn_;
            malig.fp += t.fp;
            malig.fl_gt += t.fl_gt;
            malig.fl_pred += t.fl_pred;
        }
    }
    rows.push(row_from_tally(RowClass::All, &all, mode));
    rows.push(row_from_tally(RowClass::Malig, &malig, mode));
    rows
}

/// Lesion-level metrics of one match report.
pub fn lesion_metrics(report: &MatchReport, mode: MetricsMode) -> Vec<LesionMetricsRow> {
    lesion_metrics_from_tallies(&report.tallies, mode)
}

/// Patient-level main class: the highest-priority detected lesion type, a
/// plain Normal, or - only out of [`joint_classify`] - Uncertain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatientClass {
    HCC,
    ICC,
    Meta,
    Hem,
    Other,
    Cyst,
    Normal,
    Uncertain,
}

impl PatientClass {
    fn from_label(label: ClassLabel) -> Self {
        match label.code() {
            1 => PatientClass::HCC,
            2 => PatientClass::ICC,
            3 => PatientClass::Meta,
            4 => PatientClass::Hem,
            5 => PatientClass::Other,
            6 => PatientClass::Cyst,
            _ => unreachable!("patient class comes from lesion labels"),
        }
    }

    /// Malignancy of the class; `None` for Uncertain.
    pub fn is_malignant(&self) -> Option<bool> {
        match self {
            PatientClass::HCC | PatientClass::ICC | PatientClass::Meta => Some(true),
            PatientClass::Hem
            | PatientClass::Other
            | PatientClass::Cyst
            | PatientClass::Normal => Some(false),
            PatientClass::Uncertain => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PatientClass::HCC => "HCC",
            PatientClass::ICC => "ICC",
            PatientClass::Meta => "Meta",
            PatientClass::Hem => "Hem",
            PatientClass::Other => "Other",
            PatientClass::Cyst => "Cyst",
            PatientClass::Normal => "Normal",
            PatientClass::Uncertain => "Uncertain",
        }
    }
}

impl std::fmt::Display for PatientClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The highest-priority lesion type present, or Normal for an empty set.
pub fn classify_patient(dets: &DetectionSet) -> PatientClass {
    match priority_max(dets.detections.iter().map(|d| d.label)) {
        Ok(label) => PatientClass::from_label(label),
        Err(_) => PatientClass::Normal,
    }
}

/// Consensus of two model variants: agreement passes through, disagreement
/// becomes Uncertain. Uncertain inputs are a caller bug.
pub fn joint_classify(a: PatientClass, b: PatientClass) -> Result<PatientClass> {
    if a == PatientClass::Uncertain || b == PatientClass::Uncertain {
        return Err(Error::Classification(
            "joint_classify takes per-variant classes, not Uncertain".into(),
        ));
    }
    Ok(if a == b { a } else { PatientClass::Uncertain })
}

/// Cohort-level malignancy sensitivity/specificity and 7-class accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub n_counted: usize,
    pub n_uncertain: usize,
}

/// Scores predicted patient classes against ground truth.
///
/// Malignant = {HCC, ICC, Meta}. With `exclude_uncertain`, Uncertain
/// predictions drop out of the counted cohort (consensus-style reporting);
/// otherwise they count as plain errors.
pub fn patient_metrics(
    preds: &[PatientClass],
    gts: &[PatientClass],
    exclude_uncertain: bool,
) -> Result<PatientMetrics> {
    if preds.len() != gts.len() {
        return Err(Error::Classification(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    let mut correct = 0usize;
    let mut n_counted = 0usize;
    let mut n_uncertain = 0usize;
    for (&pred, &gt) in preds.iter().zip(gts) {
        let gt_malig = gt.is_malignant().ok_or_else(|| {
            Error::Classification("ground-truth patient class cannot be Uncertain".into())
        })?;
        match pred.is_malignant() {
            None => {
                n_uncertain += 1;
                if exclude_uncertain {
                    continue;
                }
                n_counted += 1;
                // Counted as an error on both scales.
                if gt_malig {
                    fn_ += 1;
                } else {
                    fp += 1;
                }
            }
            Some(pred_malig) => {
                n_counted += 1;
                if pred == gt {
                    correct += 1;
                }
                match (gt_malig, pred_malig) {
                    (true, true) => tp += 1,
                    (true, false) => fn_ += 1,
                    (false, false) => tn += 1,
                    (false, true) => fp += 1,
                }
            }
        }
    }
    Ok(PatientMetrics {
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        accuracy: ratio(correct, n_counted),
        n_counted,
        n_uncertain,
    })
}

/// Volume bin edges in cm3; bins are half-open [lo, hi), the last unbounded.
pub const VOLUME_BIN_EDGES: [f64; 6] = [0.5, 2.0, 4.0, 8.0, 16.0, 64.0];
pub const VOLUME_BIN_LABELS: [&str; 6] = ["0.5-2", "2-4", "4-8", "8-16", "16-64", ">64"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeBinRow {
    pub class: RowClass,
    pub counts: [usize; 6],
    pub total: usize,
}

/// Per-class lesion counts stratified by volume bin. Detections below the
/// 0.5 cm3 floor are not binned.
pub fn stratify_by_volume(sets: &[&DetectionSet]) -> Vec<VolumeBinRow> {
    let mut per_class = [[0usize; 6]; 6];
    for set in sets {
        for d in &set.detections {
            let v = d.volume_cm3;
            if v < VOLUME_BIN_EDGES[0] {
                continue;
            }
            let bin = match VOLUME_BIN_EDGES.iter().rposition(|&lo| v >= lo) {
                Some(b) => b,
                None => continue,
            };
            per_class[(d.label.code() - 1) as usize][bin] += 1;
        }
    }
    let mut rows: Vec<VolumeBinRow> = ClassLabel::lesions()
        .map(|l| {
            let counts = per_class[(l.code() - 1) as usize];
            VolumeBinRow { class: RowClass::Class(l), counts, total: counts.iter().sum() }
        })
        .collect();
    let mut all = [0usize; 6];
    let mut malig = [0usize; 6];
    for (i, counts) in per_class.iter().enumerate() {
        for (b, &c) in counts.iter().enumerate() {
            all[b] += c;
            if i < 3 {
                malig[b] += c;
            }
        }
    }
    rows.push(VolumeBinRow { class: RowClass::All, counts: all, total: all.iter().sum() });
    rows.push(VolumeBinRow {
        class: RowClass::Malig,
        counts: malig,
        total: malig.iter().sum(),
    });
    rows
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(r) => format!("{:.1}%", r * 100.0),
        None => "n/a".to_string(),
    }
}

fn render_aligned(cells: &[Vec<String>]) -> String {
    let columns = cells.first().map_or(0, Vec::len);
    let widths: Vec<usize> =
        (0..columns).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in cells {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{:>width$}", cell, width = widths[c]);
        }
        out.push('\n');
    }
    out
}

/// Renders lesion metric rows as an aligned text table.
pub fn render_lesion_table(rows: &[LesionMetricsRow]) -> String {
    let mut cells: Vec<Vec<String>> = vec![
        ["Type", "FN", "FP", "FL_gt", "FL_pred", "TP", "Precision", "Recall", "Recall-rough"]
            .map(str::to_string)
            .to_vec(),
    ];
    for r in rows {
        cells.push(vec![
            r.class.name().to_string(),
            r.fn_.to_string(),
            r.fp.to_string(),
            r.fl_gt.to_string(),
            r.fl_pred.to_string(),
            r.tp.to_string(),
            pct(r.precision),
            pct(r.recall),
            pct(r.recall_rough),
        ]);
    }
    render_aligned(&cells)
}

/// Renders volume stratification rows as an aligned text table.
pub fn render_volume_table(rows: &[VolumeBinRow]) -> String {
    let mut header = vec!["Type".to_string()];
    header.extend(VOLUME_BIN_LABELS.iter().map(|s| s.to_string()));
    header.push("Total".to_string());
    let mut cells = vec![header];
    for r in rows {
        let mut row = vec![r.class.name().to_string()];
        row.extend(r.counts.iter().map(|c| c.to_string()));
        row.push(r.total.to_string());
        cells.push(row);
    }
    render_aligned(&cells)
}
