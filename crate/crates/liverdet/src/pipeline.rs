//! The full cascade over one case or a cohort: probability maps to
//! multi-sensitivity masks, instance extraction, reclassification,
//! cross-sensitivity consensus, and patient classification.
//!
//! Cases in a batch fail open: one corrupt file produces a failure record,
//! not an aborted cohort. Case-level parallelism uses a bounded worker pool;
//! per-case seeds derive from the case identity, so outputs are byte
//! identical for any worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::matcher::{match_predictions, match_sets, ClassTally, MatchReport};
use crate::metrics::{
    classify_patient, joint_classify, lesion_metrics_from_tallies, patient_metrics,
    render_lesion_table, render_volume_table, stratify_by_volume, LesionMetricsRow,
    MetricsMode, PatientClass, PatientMetrics, VolumeBinRow,
};
use crate::phantom::{noisy_segmenter, null_segmenter, truth_segmenter_from_gt, PhantomCase};
use crate::prob::ProbMaps;
use crate::reclassify::{
    reclassify_set, ExecSegmenter, LesionRecord, PatchSegmenter, ReclassifyConfig, SegmenterKind,
};
use crate::seeds;
use crate::seg2det::{extract_lesions, DetectionSet, DEFAULT_MIN_VOLUME_CM3};
use crate::sensitivity::{argmax_mask_scaled, SensitivityFactor};
use crate::shuffle::{ShuffleConfig, ShuffleContext};
use crate::volio::manifest::{CaseManifest, Phase};
use crate::volio::nifti::{read_probmaps, read_volume};

/// Everything the cascade needs for one case, already in memory.
pub struct CaseData {
    pub case_id: String,
    pub phases: Vec<(Phase, crate::grid::ScalarGrid)>,
    pub prob: Option<ProbMaps>,
    pub gt_mask: Option<LabelGrid>,
}

impl CaseData {
    /// Loads a case from its manifest, enforcing that every referenced file
    /// shares one geometry and applying the spacing override if present.
    pub fn load(manifest: &CaseManifest) -> Result<Self> {
        manifest.validate()?;
        let mut phases = Vec::new();
        for (phase, path) in &manifest.phases {
            let vol = read_volume(path)?;
            let mut img = vol.into_scalar();
            if let Some(s) = manifest.spacing_mm {
                img = img.with_spacing(s)?;
            }
            phases.push((*phase, img));
        }
        let mut prob = match &manifest.prob {
            Some(path) => Some(read_probmaps(path)?),
            None => None,
        };
        let mut gt_mask = match &manifest.gt_mask {
            Some(path) => Some(read_volume(path)?.into_labels()?),
            None => None,
        };
        if let Some(s) = manifest.spacing_mm {
            if let Some(p) = prob.take() {
                let channels = p
                    .into_channels()
                    .into_iter()
                    .map(|c| c.with_spacing(s))
                    .collect::<Result<Vec<_>>>()?;
                prob = Some(ProbMaps::new(channels)?);
            }
            if let Some(g) = gt_mask.take() {
                gt_mask = Some(g.with_spacing(s)?);
            }
        }

        let reference = &phases[0].1;
        for (phase, img) in &phases[1..] {
            reference.same_geometry(img).map_err(|e| Error::Manifest {
                path: manifest.case_id.clone(),
                message: format!("phase {} geometry: {e}", phase.tag()),
            })?;
        }
        if let Some(p) = &prob {
            reference.same_geometry(p.channel(crate::labels::ClassLabel::BACKGROUND)).map_err(
                |e| Error::Manifest {
                    path: manifest.case_id.clone(),
                    message: format!("probability maps geometry: {e}"),
                },
            )?;
        }
        if let Some(g) = &gt_mask {
            reference.same_geometry(g).map_err(|e| Error::Manifest {
                path: manifest.case_id.clone(),
                message: format!("gt mask geometry: {e}"),
            })?;
        }
        Ok(CaseData { case_id: manifest.case_id.clone(), phases, prob, gt_mask })
    }

    pub fn from_phantom(case: &PhantomCase) -> Self {
        CaseData {
            case_id: case.spec.case_id.clone(),
            phases: case.images.iter().map(|(p, g)| (*p, g.clone())).collect(),
            prob: Some(case.prob.clone()),
            gt_mask: Some(case.gt_mask.clone()),
        }
    }
}

/// Cascade configuration shared by every case of a run.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Sensitivity factors, low to high; the consensus pairs the first and
    /// last.
    pub factors: Vec<f64>,
    pub min_volume_cm3: f64,
    pub min_overlap_voxels: usize,
    pub enable_reclassify: bool,
    pub reclassify: ReclassifyConfig,
    pub shuffle: ShuffleConfig,
    pub segmenter: SegmenterKind,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            factors: vec![1.0, 4.0],
            min_volume_cm3: DEFAULT_MIN_VOLUME_CM3,
            min_overlap_voxels: 1,
            enable_reclassify: true,
            reclassify: ReclassifyConfig::default(),
            shuffle: ShuffleConfig::default(),
            segmenter: SegmenterKind::MockNull,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::EmptyInput("pipeline needs at least one sensitivity factor"));
        }
        for &f in &self.factors {
            SensitivityFactor::new(f)?;
        }
        self.reclassify.validate()
    }
}

/// Builds the configured segmenter for one case. Mocks bind to the case's
/// ground truth.
pub fn build_segmenter(
    kind: &SegmenterKind,
    gt: Option<&LabelGrid>,
    seed: u64,
) -> Result<Box<dyn PatchSegmenter>> {
    let need_gt = || {
        gt.cloned().ok_or_else(|| {
            Error::Manifest {
                path: String::new(),
                message: "mock segmenters need a ground-truth mask".into(),
            }
        })
    };
    Ok(match kind {
        SegmenterKind::MockTruth => Box::new(truth_segmenter_from_gt(need_gt()?)),
        SegmenterKind::MockNull => Box::new(null_segmenter()),
        SegmenterKind::MockNoisy(p) => Box::new(noisy_segmenter(need_gt()?, *p, seed)?),
        SegmenterKind::Exec(cmd) => Box::new(ExecSegmenter::new(cmd)?),
    })
}

/// Output of one sensitivity factor on one case.
#[derive(Debug, Clone)]
pub struct FactorOutput {
    pub factor: f64,
    pub raw: DetectionSet,
    /// Final set: reclassified when enabled, otherwise the raw set.
    pub detections: DetectionSet,
    pub records: Vec<LesionRecord>,
    pub patient: PatientClass,
}

/// Full per-case result.
pub struct CaseResult {
    pub case_id: String,
    pub factors: Vec<FactorOutput>,
    /// Consensus and difference sets of (lowest, highest) factor.
    pub consensus: Option<(DetectionSet, DetectionSet)>,
    pub joint_patient: Option<PatientClass>,
    pub eval: Option<CaseEval>,
}

/// Ground-truth side evaluation of one case.
pub struct CaseEval {
    pub gt: DetectionSet,
    pub gt_patient: PatientClass,
    /// One report per factor: final detections vs ground truth.
    pub reports: Vec<MatchReport>,
}

/// A case failure with the stage that produced it.
#[derive(Debug, Serialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub stage: String,
    pub error: String,
}

fn stage_err<T>(r: Result<T>, case_id: &str, stage: &str) -> std::result::Result<T, CaseFailure> {
    r.map_err(|e| CaseFailure {
        case_id: case_id.to_string(),
        stage: stage.to_string(),
        error: e.to_string(),
    })
}

/// Runs the cascade on one case.
pub fn run_case(
    data: &CaseData,
    config: &PipelineConfig,
) -> std::result::Result<CaseResult, CaseFailure> {
    let case_id = data.case_id.clone();
    stage_err(config.validate(), &case_id, "config")?;

    let masks: Vec<(f64, LabelGrid)> = match (&data.prob, &data.gt_mask) {
        (Some(prob), _) => config
            .factors
            .iter()
            .map(|&f| {
                let factor = SensitivityFactor::new(f).expect("validated");
                (f, argmax_mask_scaled(prob, factor))
            })
            .collect(),
        (None, Some(gt)) => config.factors.iter().map(|&f| (f, gt.clone())).collect(),
        (None, None) => {
            return Err(CaseFailure {
                case_id,
                stage: "input".into(),
                error: "case has neither probability maps nor a ground-truth mask".into(),
            })
        }
    };

    let mut factors = Vec::with_capacity(masks.len());
    for (f, mask) in masks {
        let raw = stage_err(
            extract_lesions(&mask, &case_id, config.min_volume_cm3),
            &case_id,
            "seg2det",
        )?;
        let (detections, records) = if config.enable_reclassify {
            let seed = seeds::mix(&[config.seed, seeds::word(&case_id), f.to_bits()]);
            let segmenter = stage_err(
                build_segmenter(&config.segmenter, data.gt_mask.as_ref(), seed),
                &case_id,
                "reclassify",
            )?;
            let ctx = stage_err(
                ShuffleContext::new(
                    data.phases.clone(),
                    mask,
                    raw.clone(),
                    config.shuffle,
                ),
                &case_id,
                "reclassify",
            )?;
            let outcome = stage_err(
                reclassify_set(&raw, &ctx, segmenter.as_ref(), &config.reclassify, seed),
                &case_id,
                "reclassify",
            )?;
            (outcome.set, outcome.records)
        } else {
            (raw.clone(), Vec::new())
        };
        let patient = classify_patient(&detections);
        factors.push(FactorOutput { factor: f, raw, detections, records, patient });
    }

    let (consensus, joint_patient) = if factors.len() >= 2 {
        let low = &factors[0];
        let high = &factors[factors.len() - 1];
        let sets = stage_err(
            match_predictions(&low.detections, &high.detections),
            &case_id,
            "match",
        )?;
        let joint = stage_err(
            joint_classify(low.patient, high.patient),
            &case_id,
            "classify-patient",
        )?;
        (Some(sets), Some(joint))
    } else {
        (None, None)
    };

    let eval = match &data.gt_mask {
        Some(gt_mask) => {
            let gt = stage_err(
                extract_lesions(gt_mask, &case_id, config.min_volume_cm3),
                &case_id,
                "seg2det",
            )?;
            let mut reports = Vec::with_capacity(factors.len());
            for f in &factors {
                reports.push(stage_err(
                    match_sets(&gt, &f.detections, config.min_overlap_voxels),
                    &case_id,
                    "match",
                )?);
            }
            let gt_patient = classify_patient(&gt);
            Some(CaseEval { gt, gt_patient, reports })
        }
        None => None,
    };

    Ok(CaseResult { case_id, factors, consensus, joint_patient, eval })
}

/// Batch output: successful results in input order plus failure records.
pub struct BatchOutput {
    pub results: Vec<CaseResult>,
    pub failures: Vec<CaseFailure>,
}

/// Runs a batch of already-loaded cases on `jobs` worker threads.
pub fn run_cases(cases: &[CaseData], config: &PipelineConfig, jobs: usize) -> BatchOutput {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("worker pool");
    let outcomes: Vec<std::result::Result<CaseResult, CaseFailure>> =
        pool.install(|| cases.par_iter().map(|c| run_case(c, config)).collect());
    split_outcomes(outcomes)
}

/// Loads manifests and runs the cascade over each, failing open per case.
pub fn run_batch(
    manifest_paths: &[PathBuf],
    config: &PipelineConfig,
    jobs: usize,
) -> BatchOutput {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("worker pool");
    let outcomes: Vec<std::result::Result<CaseResult, CaseFailure>> = pool.install(|| {
        manifest_paths
            .par_iter()
            .map(|path| {
                let manifest = CaseManifest::load(path).map_err(|e| CaseFailure {
                    case_id: path.display().to_string(),
                    stage: "manifest".into(),
                    error: e.to_string(),
                })?;
                let data = CaseData::load(&manifest).map_err(|e| CaseFailure {
                    case_id: manifest.case_id.clone(),
                    stage: "load".into(),
                    error: e.to_string(),
                })?;
                run_case(&data, config)
            })
            .collect()
    });
    split_outcomes(outcomes)
}

fn split_outcomes(
    outcomes: Vec<std::result::Result<CaseResult, CaseFailure>>,
) -> BatchOutput {
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(f) => failures.push(f),
        }
    }
    BatchOutput { results, failures }
}

/// Aggregated lesion metrics of one model variant over a cohort.
#[derive(Debug, Serialize)]
pub struct VariantEval {
    pub factor: f64,
    pub tallies: [ClassTally; 6],
    pub strict: Vec<LesionMetricsRow>,
    pub table_consistent: Vec<LesionMetricsRow>,
    pub patient: PatientMetrics,
}

/// Cohort evaluation across variants, including the joint model.
#[derive(Debug, Serialize)]
pub struct CohortReport {
    pub cases: usize,
    pub evaluated: usize,
    pub variants: Vec<VariantEval>,
    /// Joint patient metrics with Uncertain cases excluded.
    pub joint_patient: Option<PatientMetrics>,
    /// Lesion metrics of the highest factor restricted to consensus cases.
    pub consensus_lesion: Option<VariantEval>,
    pub gt_volume_bins: Vec<VolumeBinRow>,
}

/// Aggregates per-case evaluations into a cohort report. Cases without
/// ground truth are skipped.
pub fn evaluate_batch(results: &[CaseResult]) -> Option<CohortReport> {
    let evaluated: Vec<&CaseResult> = results.iter().filter(|r| r.eval.is_some()).collect();
    if evaluated.is_empty() {
        return None;
    }
    let n_factors = evaluated[0].factors.len();

    let mut variants = Vec::new();
    for fi in 0..n_factors {
        let factor = evaluated[0].factors[fi].factor;
        let mut tallies = [ClassTally::default(); 6];
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for r in &evaluated {
            let eval = r.eval.as_ref().expect("filtered");
            MatchReport::accumulate(&mut tallies, &eval.reports[fi]);
            preds.push(r.factors[fi].patient);
            gts.push(eval.gt_patient);
        }
        variants.push(VariantEval {
            factor,
            tallies,
            strict: lesion_metrics_from_tallies(&tallies, MetricsMode::Strict),
            table_consistent: lesion_metrics_from_tallies(
                &tallies,
                MetricsMode::TableConsistent,
            ),
            patient: patient_metrics(&preds, &gts, false).expect("equal lengths"),
        });
    }

    let (joint_patient, consensus_lesion) = if n_factors >= 2 {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut tallies = [ClassTally::default(); 6];
        for r in &evaluated {
            let eval = r.eval.as_ref().expect("filtered");
            let joint = r.joint_patient.expect("two factors imply a joint class");
            preds.push(joint);
            gts.push(eval.gt_patient);
            if joint != PatientClass::Uncertain {
                MatchReport::accumulate(&mut tallies, &eval.reports[n_factors - 1]);
            }
        }
        let joint = patient_metrics(&preds, &gts, true).expect("equal lengths");
        let consensus = VariantEval {
            factor: evaluated[0].factors[n_factors - 1].factor,
            tallies,
            strict: lesion_metrics_from_tallies(&tallies, MetricsMode::Strict),
            table_consistent: lesion_metrics_from_tallies(
                &tallies,
                MetricsMode::TableConsistent,
            ),
            patient: joint.clone(),
        };
        (Some(joint), Some(consensus))
    } else {
        (None, None)
    };

    let gt_sets: Vec<&DetectionSet> =
        evaluated.iter().map(|r| &r.eval.as_ref().expect("filtered").gt).collect();
    Some(CohortReport {
        cases: results.len(),
        evaluated: evaluated.len(),
        variants,
        joint_patient,
        consensus_lesion,
        gt_volume_bins: stratify_by_volume(&gt_sets),
    })
}

impl CohortReport {
    /// Human-readable multi-table rendering.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "Cohort: {} cases, {} evaluated against ground truth\n\n",
            self.cases, self.evaluated
        ));
        for v in &self.variants {
            out.push_str(&format!("== factor {} (table-consistent) ==\n", v.factor));
            out.push_str(&render_lesion_table(&v.table_consistent));
            out.push_str(&format!(
                "patient: sensitivity {} specificity {} accuracy {} (n={})\n\n",
                fmt_pct(v.patient.sensitivity),
                fmt_pct(v.patient.specificity),
                fmt_pct(v.patient.accuracy),
                v.patient.n_counted,
            ));
        }
        if let Some(j) = &self.joint_patient {
            out.push_str(&format!(
                "joint consensus: sensitivity {} specificity {} accuracy {} (n={}, uncertain={})\n\n",
                fmt_pct(j.sensitivity),
                fmt_pct(j.specificity),
                fmt_pct(j.accuracy),
                j.n_counted,
                j.n_uncertain,
            ));
        }
        if let Some(c) = &self.consensus_lesion {
            out.push_str(&format!(
                "== consensus portion, factor {} (table-consistent) ==\n",
                c.factor
            ));
            out.push_str(&render_lesion_table(&c.table_consistent));
            out.push('\n');
        }
        out.push_str("== ground-truth lesions by volume (cm3) ==\n");
        out.push_str(&render_volume_table(&self.gt_volume_bins));
        out
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(r) => format!("{:.1}%", r * 100.0),
        None => "n/a".into(),
    }
}

/// Writes one case's outputs under `dir/<case_id>/`.
pub fn write_case_outputs(result: &CaseResult, dir: &Path) -> Result<()> {
    let case_dir = dir.join(&result.case_id);
    std::fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
    for f in &result.factors {
        let tag = format!("f{}", f.factor);
        crate::volio::detjson::write_detections_file(
            &f.raw,
            case_dir.join(format!("det_{tag}_raw.json")),
        )?;
        crate::volio::detjson::write_detections_file(
            &f.detections,
            case_dir.join(format!("det_{tag}.json")),
        )?;
        if !f.records.is_empty() {
            let path = case_dir.join(format!("reclassify_{tag}.json"));
            let json = serde_json::to_string_pretty(&f.records)?;
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }
    }
    if let Some((same, diff)) = &result.consensus {
        crate::volio::detjson::write_detections_file(same, case_dir.join("same.json"))?;
        crate::volio::detjson::write_detections_file(diff, case_dir.join("diff.json"))?;
    }
    let mut patient = BTreeMap::new();
    for f in &result.factors {
        patient.insert(format!("f{}", f.factor), f.patient.name().to_string());
    }
    if let Some(j) = result.joint_patient {
        patient.insert("joint".into(), j.name().to_string());
    }
    if let Some(eval) = &result.eval {
        patient.insert("gt".into(), eval.gt_patient.name().to_string());
    }
    let path = case_dir.join("patient.json");
    let json = serde_json::to_string_pretty(&patient)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Spacing};
    use crate::phantom::{generate_case, random_spec, Ellipsoid, LesionSpec, PhantomSpec};
    use crate::labels::ClassLabel;

    fn small_dims() -> (Dims, Spacing) {
        (Dims::new(24, 64, 64), Spacing { z: 2.5, y: 1.5, x: 1.5 })
    }

    fn small_shuffle() -> ShuffleConfig {
        ShuffleConfig { patch_dims: Dims { z: 8, y: 16, x: 16 }, ..ShuffleConfig::default() }
    }

    fn opts(min_confidence: f64, with_decoys: bool) -> crate::phantom::RandomSpecOptions {
        let (dims, spacing) = small_dims();
        crate::phantom::RandomSpecOptions {
            dims,
            spacing,
            with_decoys,
            min_confidence,
            ..crate::phantom::RandomSpecOptions::default()
        }
    }

    fn spec_with(lesions: Vec<LesionSpec>, decoys: Vec<LesionSpec>) -> PhantomSpec {
        let (dims, spacing) = small_dims();
        PhantomSpec {
            case_id: "t0".into(),
            dims,
            spacing,
            seed: 5,
            phases: vec![Phase::NC],
            liver: Ellipsoid { center: (12.0, 32.0, 32.0), radii_mm: (24.0, 42.0, 42.0) },
            lesions,
            decoys,
            organs: vec![],
            noise_hu: 1.0,
        }
    }

    fn lesion(
        class: u8,
        center: (f64, f64, f64),
        confidence: f64,
    ) -> LesionSpec {
        LesionSpec {
            class: ClassLabel::lesion(class).unwrap(),
            shape: Ellipsoid { center, radii_mm: (6.0, 7.0, 7.0) },
            confidence,
            contrast_hu: 35.0,
        }
    }

    #[test]
    fn base_model_misses_weak_lesions() {
        // c = 0.45 is below the f=1 threshold (0.5) but above f=4's (0.2).
        let spec = spec_with(
            vec![lesion(1, (12.0, 32.0, 32.0), 0.45), lesion(3, (12.0, 32.0, 52.0), 0.60)],
            vec![],
        );
        let case = generate_case(&spec).unwrap();
        let data = CaseData::from_phantom(&case);
        let config = PipelineConfig {
            factors: vec![1.0],
            enable_reclassify: false,
            shuffle: small_shuffle(),
            ..PipelineConfig::default()
        };
        let result = run_case(&data, &config).unwrap();
        assert_eq!(result.factors[0].detections.len(), 1);
        assert_eq!(result.factors[0].detections.detections[0].label, ClassLabel::META);
        // At factor 4 both appear.
        let config_high = PipelineConfig { factors: vec![4.0], ..config };
        let high = run_case(&data, &config_high).unwrap();
        assert_eq!(high.factors[0].detections.len(), 2);
    }

    #[test]
    fn truth_segmenter_joint_classification_matches_gt() {
        let config = PipelineConfig {
            segmenter: SegmenterKind::MockTruth,
            shuffle: small_shuffle(),
            seed: 9,
            ..PipelineConfig::default()
        };
        // Every lesion detectable at both factors, so base and high agree.
        let o = opts(0.55, false);
        for index in 0..6u64 {
            let spec = random_spec(0xabc, index, &o);
            let case = generate_case(&spec).unwrap();
            let data = CaseData::from_phantom(&case);
            let result = run_case(&data, &config).unwrap();
            let eval = result.eval.as_ref().unwrap();
            assert_eq!(
                result.joint_patient.unwrap(),
                eval.gt_patient,
                "case {index}: joint patient class should match ground truth"
            );
        }
    }

    #[test]
    fn decoys_raise_fp_with_sensitivity_and_reclassify_removes_them() {
        // Decoy at c=0.3: invisible at f=1, a false positive at f=4.
        let spec = spec_with(
            vec![lesion(1, (12.0, 32.0, 32.0), 0.60)],
            vec![lesion(2, (12.0, 32.0, 52.0), 0.30)],
        );
        let case = generate_case(&spec).unwrap();
        let data = CaseData::from_phantom(&case);

        let no_recls = PipelineConfig {
            enable_reclassify: false,
            shuffle: small_shuffle(),
            ..PipelineConfig::default()
        };
        let result = run_case(&data, &no_recls).unwrap();
        let eval = result.eval.as_ref().unwrap();
        let fp_base = eval.reports[0].total().fp;
        let fp_high = eval.reports[1].total().fp;
        let fn_base = eval.reports[0].total().fn_;
        let fn_high = eval.reports[1].total().fn_;
        assert!(fp_high >= fp_base);
        assert!(fn_high <= fn_base);
        assert_eq!(fp_high, 1, "decoy visible at f=4");

        // Truth-segmenter reclassification removes the decoy, keeps the
        // true lesion.
        let with_recls = PipelineConfig {
            segmenter: SegmenterKind::MockTruth,
            shuffle: small_shuffle(),
            ..PipelineConfig::default()
        };
        let result = run_case(&data, &with_recls).unwrap();
        let eval = result.eval.as_ref().unwrap();
        assert_eq!(eval.reports[1].total().fp, 0, "decoy reclassified away");
        assert_eq!(eval.reports[1].total().tp, 1);
    }

    #[test]
    fn noisy_segmenter_increases_false_negatives() {
        let mut base_fn = 0usize;
        let mut noisy_fn = 0usize;
        let o = opts(0.0, false);
        for index in 0..8u64 {
            let spec = random_spec(0xf00d, index, &o);
            let case = generate_case(&spec).unwrap();
            let data = CaseData::from_phantom(&case);
            let no_recls = PipelineConfig {
                enable_reclassify: false,
                factors: vec![1.0],
                shuffle: small_shuffle(),
                ..PipelineConfig::default()
            };
            let noisy = PipelineConfig {
                segmenter: SegmenterKind::MockNoisy(0.7),
                factors: vec![1.0],
                shuffle: small_shuffle(),
                seed: index,
                ..PipelineConfig::default()
            };
            base_fn += run_case(&data, &no_recls)
                .unwrap()
                .eval
                .unwrap()
                .reports[0]
                .total()
                .fn_;
            noisy_fn += run_case(&data, &noisy)
                .unwrap()
                .eval
                .unwrap()
                .reports[0]
                .total()
                .fn_;
        }
        assert!(
            noisy_fn >= base_fn,
            "imperfect reclassification costs recall: {noisy_fn} vs {base_fn}"
        );
    }

    #[test]
    fn batch_is_deterministic_across_worker_counts() {
        let o = opts(0.0, true);
        let cases: Vec<CaseData> = (0..6u64)
            .map(|i| {
                let spec = random_spec(0x7777, i, &o);
                CaseData::from_phantom(&generate_case(&spec).unwrap())
            })
            .collect();
        let config = PipelineConfig {
            segmenter: SegmenterKind::MockTruth,
            shuffle: small_shuffle(),
            seed: 11,
            ..PipelineConfig::default()
        };
        let single = run_cases(&cases, &config, 1);
        let parallel = run_cases(&cases, &config, 8);
        assert_eq!(single.results.len(), parallel.results.len());
        for (a, b) in single.results.iter().zip(&parallel.results) {
            assert_eq!(a.case_id, b.case_id);
            for (fa, fb) in a.factors.iter().zip(&b.factors) {
                assert_eq!(fa.detections, fb.detections);
                assert_eq!(
                    crate::volio::detjson::write_detections(&fa.detections),
                    crate::volio::detjson::write_detections(&fb.detections)
                );
            }
            assert_eq!(a.joint_patient, b.joint_patient);
        }
    }

    #[test]
    fn batch_fails_open_on_bad_case() {
        let dir = tempfile::tempdir().unwrap();
        // One good phantom case and one broken manifest.
        let spec = random_spec(0x600d, 0, &opts(0.0, false));
        let case = generate_case(&spec).unwrap();
        let good_dir = dir.path().join("good");
        case.write(&good_dir).unwrap();
        let bad_dir = dir.path().join("bad");
        std::fs::create_dir_all(&bad_dir).unwrap();
        std::fs::write(bad_dir.join("manifest.json"), "{\"nope\": 1}").unwrap();

        let manifests = crate::volio::manifest::discover_manifests(dir.path()).unwrap();
        assert_eq!(manifests.len(), 2);
        let config = PipelineConfig {
            segmenter: SegmenterKind::MockTruth,
            shuffle: small_shuffle(),
            ..PipelineConfig::default()
        };
        let out = run_batch(&manifests, &config, 2);
        assert_eq!(out.results.len(), 1);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].stage, "manifest");
    }

    #[test]
    fn cohort_report_aggregates() {
        let o = opts(0.55, false);
        let cases: Vec<CaseData> = (0..5u64)
            .map(|i| {
                let spec = random_spec(0xcafe, i, &o);
                CaseData::from_phantom(&generate_case(&spec).unwrap())
            })
            .collect();
        let config = PipelineConfig {
            segmenter: SegmenterKind::MockTruth,
            shuffle: small_shuffle(),
            ..PipelineConfig::default()
        };
        let out = run_cases(&cases, &config, 2);
        assert!(out.failures.is_empty());
        let report = evaluate_batch(&out.results).unwrap();
        assert_eq!(report.cases, 5);
        assert_eq!(report.evaluated, 5);
        assert_eq!(report.variants.len(), 2);
        assert!(report.joint_patient.is_some());
        let text = report.render_text();
        assert!(text.contains("factor 4"));
        assert!(text.contains("volume"));
        // Truth segmenter on clean phantoms: perfect joint classification.
        let joint = report.joint_patient.as_ref().unwrap();
        assert_eq!(joint.accuracy, Some(1.0));
    }

    #[test]
    fn write_case_outputs_layout() {
        let spec = spec_with(vec![lesion(4, (12.0, 32.0, 32.0), 0.75)], vec![]);
        let case = generate_case(&spec).unwrap();
        let data = CaseData::from_phantom(&case);
        let config = PipelineConfig {
            segmenter: SegmenterKind::MockTruth,
            shuffle: small_shuffle(),
            ..PipelineConfig::default()
        };
        let result = run_case(&data, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_case_outputs(&result, dir.path()).unwrap();
        let case_dir = dir.path().join("t0");
        for name in [
            "det_f1_raw.json",
            "det_f1.json",
            "det_f4_raw.json",
            "det_f4.json",
            "same.json",
            "diff.json",
            "patient.json",
        ] {
            assert!(case_dir.join(name).exists(), "{name} missing");
        }
        let same = crate::volio::detjson::read_detections_file(case_dir.join("same.json"))
            .unwrap();
        assert_eq!(same.len(), 1);
    }
}
