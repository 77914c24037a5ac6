//! Command-line surface of the liver-lesion detection toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 input or parse error, 3 contract
//! violation (a misbehaving external segmenter). Results go to files or
//! standard output as JSON; log lines go to standard error.
//!
//! Every flag can also come from a flat `key=value` config file passed with
//! `--config`; explicit flags win over the file, the file wins over
//! defaults.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use liverdet::error::Error;
use liverdet::grid::{Dims, Spacing};
use liverdet::matcher::{match_sets, ClassTally, MatchReport};
use liverdet::metrics::{
    classify_patient, lesion_metrics_from_tallies, patient_metrics, render_lesion_table,
    render_volume_table, stratify_by_volume, LesionMetricsRow, MetricsMode, PatientMetrics,
    VolumeBinRow,
};
use liverdet::phantom::{generate_case, random_spec, RandomSpecOptions};
use liverdet::pipeline::{
    build_segmenter, evaluate_batch, run_batch, write_case_outputs, CaseData, PipelineConfig,
};
use liverdet::reclassify::{reclassify_set, ReclassifyConfig, SegmenterKind};
use liverdet::seg2det::{extract_lesions, DetectionSet, DEFAULT_MIN_VOLUME_CM3};
use liverdet::sensitivity::{argmax_mask_scaled, SensitivityFactor};
use liverdet::shuffle::{
    make_inference_patches, make_training_patches, write_patch_bundle, ShuffleConfig,
    ShuffleContext,
};
use liverdet::volio::detjson::{read_detections_file, write_detections};
use liverdet::volio::manifest::{discover_manifests, CaseManifest};
use liverdet::volio::nifti::{read_probmaps, read_volume};

#[derive(Parser)]
#[command(
    name = "liverdet",
    version,
    about = "Cascaded liver-lesion detection: sensitivity scaling, instance extraction, \
             shuffle augmentation, reclassification, and evaluation"
)]
struct Cli {
    /// Flat key=value config file; explicit flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print full error details.
    #[arg(long, global = true)]
    debug: bool,
    /// Suppress log lines on standard error.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom cases with analytic ground truth.
    Phantom {
        #[command(subcommand)]
        action: PhantomAction,
    },
    /// Probability maps (or a label mask) to a lesion detection set.
    Detect(DetectArgs),
    /// Pair two detection sets and report TP / FL / FP / FN outcomes.
    Match(MatchArgs),
    /// Produce lesion-shuffle augmentation patch bundles.
    Shuffle(ShuffleArgs),
    /// Score detections with a patch segmenter; drop and relabel.
    Reclassify(ReclassifyArgs),
    /// Patient-level main lesion class of a detection set.
    ClassifyPatient(ClassifyPatientArgs),
    /// Lesion-level and patient-level metrics of predictions vs ground truth.
    Evaluate(EvaluateArgs),
    /// Full cascade over a directory of case manifests.
    Pipeline(PipelineArgs),
}

#[derive(Subcommand)]
enum PhantomAction {
    /// Write N seeded cases (images, ground truth, probability maps).
    Gen(PhantomGenArgs),
}

#[derive(Args)]
struct PhantomGenArgs {
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of cases [default: 1]
    #[arg(long)]
    cases: Option<usize>,
    /// Volume dims as Z,Y,X [default: 32,160,160]
    #[arg(long)]
    dims: Option<String>,
    /// Voxel spacing in mm as Z,Y,X [default: 2.5,1.0,1.0]
    #[arg(long)]
    spacing: Option<String>,
    /// Also plant decoy confidence blobs (false-positive material).
    #[arg(long)]
    with_decoys: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// 14-channel probability NIfTI.
    #[arg(long)]
    prob: Option<PathBuf>,
    /// Label-mask NIfTI (alternative to --prob).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Lesion sensitivity factor [default: 1.0]
    #[arg(long)]
    factor: Option<f64>,
    /// Minimum instance volume in cm3 [default: 0.5]
    #[arg(long)]
    min_volume: Option<f64>,
    /// Case id [default: input file stem]
    #[arg(long)]
    case_id: Option<String>,
    /// Output JSON path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    /// Ground-truth detection JSON.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Predicted detection JSON.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Minimum shared voxels for a candidate pair [default: 1]
    #[arg(long)]
    min_overlap: Option<usize>,
    /// Output JSON path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ShuffleArgs {
    /// Case manifest JSON.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// train: four-scheme training patches; infer: per-lesion patches.
    #[arg(long)]
    mode: Option<String>,
    /// Detection JSON to shuffle [default: instances of the GT mask]
    #[arg(long)]
    det: Option<PathBuf>,
    /// Inference patches per lesion [default: 10]
    #[arg(long)]
    n: Option<usize>,
    /// Training patches per lesion and scheme [default: 20]
    #[arg(long)]
    per_lesion: Option<usize>,
    /// Patch dims as Z,Y,X [default: 16,128,128]
    #[arg(long)]
    patch_dims: Option<String>,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for patch bundles.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReclassifyArgs {
    /// Detection JSON to reclassify.
    #[arg(long)]
    det: Option<PathBuf>,
    /// Case manifest JSON.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// mock:truth | mock:null | mock:noisy:<p> | exec:<cmd>
    #[arg(long)]
    segmenter: Option<String>,
    /// Inference patches per lesion [default: 10]
    #[arg(long)]
    n: Option<usize>,
    /// Discard threshold in cm3 [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Volume above which lesions skip reclassification [default: 64]
    #[arg(long)]
    skip_volume: Option<f64>,
    /// Sensitivity factor used to rebuild the context mask from
    /// probabilities [default: 1.0]
    #[arg(long)]
    factor: Option<f64>,
    /// Patch dims as Z,Y,X [default: 16,128,128]
    #[arg(long)]
    patch_dims: Option<String>,
    /// Disable shuffled positives (ablation).
    #[arg(long)]
    no_shuffle: bool,
    /// Disable volume-based relabel voting.
    #[arg(long)]
    no_relabel: bool,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional path for the per-lesion audit records.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyPatientArgs {
    /// Detection JSON.
    #[arg(long)]
    det: Option<PathBuf>,
    /// Output JSON path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ground-truth detection JSON (file, or directory of files).
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Predicted detection JSON (file, or directory of files).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Metrics mode for the printed table: strict | table [default: table]
    #[arg(long)]
    mode: Option<String>,
    /// Minimum shared voxels for a candidate pair [default: 1]
    #[arg(long)]
    min_overlap: Option<usize>,
    /// Write the full evaluation report (both modes) as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Directory scanned recursively for case manifests.
    #[arg(long)]
    manifest_dir: Option<PathBuf>,
    /// Comma-separated sensitivity factors [default: 1.0,4.0]
    #[arg(long)]
    factors: Option<String>,
    /// mock:truth | mock:null | mock:noisy:<p> | exec:<cmd> [default: mock:null]
    #[arg(long)]
    segmenter: Option<String>,
    /// Minimum instance volume in cm3 [default: 0.5]
    #[arg(long)]
    min_volume: Option<f64>,
    /// Minimum shared voxels when matching [default: 1]
    #[arg(long)]
    min_overlap: Option<usize>,
    /// Inference patches per lesion [default: 10]
    #[arg(long)]
    n: Option<usize>,
    /// Discard threshold in cm3 [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Volume above which lesions skip reclassification [default: 64]
    #[arg(long)]
    skip_volume: Option<f64>,
    /// Patch dims as Z,Y,X [default: 16,128,128]
    #[arg(long)]
    patch_dims: Option<String>,
    /// Disable the reclassification stage (base variant).
    #[arg(long)]
    no_reclassify: bool,
    /// Disable shuffled positives in reclassification (ablation).
    #[arg(long)]
    no_shuffle: bool,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: available cores]
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Resolved global context: config-file values and logging switches.
struct Ctx {
    file: HashMap<String, String>,
    quiet: bool,
}

impl Ctx {
    fn info(&self, msg: &str) {
        if !self.quiet {
            eprintln!("level=info msg=\"{msg}\"");
        }
    }

    fn warn(&self, msg: &str) {
        eprintln!("level=warn msg=\"{msg}\"");
    }

    /// flag > config file > default.
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Error> {
        self.opt(flag, key).map(|v| v.unwrap_or(default))
    }

    fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Error> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| Error::Manifest {
                path: format!("config key `{key}`"),
                message: format!("cannot parse `{raw}`"),
            }),
            None => Ok(None),
        }
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, Error> {
        self.opt(flag, key)?.ok_or_else(|| Error::Manifest {
            path: String::new(),
            message: format!("missing required option --{key} (or config key `{key}`)"),
        })
    }
}

fn load_config(path: Option<&Path>) -> Result<HashMap<String, String>, Error> {
    let Some(path) = path else { return Ok(HashMap::new()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Manifest {
                path: format!("{}:{}", path.display(), lineno + 1),
                message: format!("expected key=value, got `{line}`"),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_triple(s: &str, what: &str) -> Result<(f64, f64, f64), Error> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidGeometry(format!("{what} must be Z,Y,X, got `{s}`")));
    }
    let mut vals = [0.0f64; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p.trim().parse().map_err(|_| {
            Error::InvalidGeometry(format!("{what}: cannot parse `{p}` as a number"))
        })?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

fn parse_dims(s: &str) -> Result<Dims, Error> {
    let (z, y, x) = parse_triple(s, "dims")?;
    Ok(Dims::new(z as usize, y as usize, x as usize))
}

fn parse_factors(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|p| {
            let f: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::InvalidGeometry(format!("bad factor `{p}`")))?;
            SensitivityFactor::new(f)?;
            Ok(f)
        })
        .collect()
}

fn write_output(out: Option<&Path>, payload: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, payload).map_err(|e| Error::io(path, e)),
        None => {
            println!("{payload}");
            Ok(())
        }
    }
}

fn file_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .trim_end_matches(".json")
        .to_string()
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let debug = cli.debug;
    let ctx = match load_config(cli.config.as_deref()) {
        Ok(file) => Ctx { file, quiet: cli.quiet },
        Err(e) => {
            eprintln!("level=error msg=\"{e}\"");
            std::process::exit(2);
        }
    };
    match dispatch(cli.command, &ctx) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("level=error msg=\"{e}\"");
            if debug {
                eprintln!("{e:?}");
            }
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(command: Command, ctx: &Ctx) -> Result<i32, Error> {
    match command {
        Command::Phantom { action: PhantomAction::Gen(args) } => cmd_phantom_gen(args, ctx),
        Command::Detect(args) => cmd_detect(args, ctx),
        Command::Match(args) => cmd_match(args, ctx),
        Command::Shuffle(args) => cmd_shuffle(args, ctx),
        Command::Reclassify(args) => cmd_reclassify(args, ctx),
        Command::ClassifyPatient(args) => cmd_classify_patient(args, ctx),
        Command::Evaluate(args) => cmd_evaluate(args, ctx),
        Command::Pipeline(args) => cmd_pipeline(args, ctx),
    }
}

fn cmd_phantom_gen(args: PhantomGenArgs, ctx: &Ctx) -> Result<i32, Error> {
    let seed = ctx.get(args.seed, "seed", 0)?;
    let cases = ctx.get(args.cases, "cases", 1)?;
    let dims = parse_dims(&ctx.get(args.dims, "dims", "32,160,160".into())?)?;
    let (sz, sy, sx) =
        parse_triple(&ctx.get(args.spacing, "spacing", "2.5,1.0,1.0".into())?, "spacing")?;
    let out: PathBuf = ctx.require(args.out, "out")?;
    let opts = RandomSpecOptions {
        dims,
        spacing: Spacing::new(sz, sy, sx)?,
        with_decoys: args.with_decoys || ctx.file.get("with-decoys").is_some_and(|v| v == "true"),
        ..RandomSpecOptions::default()
    };
    for index in 0..cases {
        let spec = random_spec(seed, index as u64, &opts);
        let case = generate_case(&spec)?;
        let dir = out.join(&spec.case_id);
        case.write(&dir)?;
        ctx.info(&format!(
            "wrote case {} with {} lesions to {}",
            spec.case_id,
            spec.lesions.len(),
            dir.display()
        ));
    }
    Ok(0)
}

fn cmd_detect(args: DetectArgs, ctx: &Ctx) -> Result<i32, Error> {
    let factor = SensitivityFactor::new(ctx.get(args.factor, "factor", 1.0)?)?;
    let min_volume = ctx.get(args.min_volume, "min-volume", DEFAULT_MIN_VOLUME_CM3)?;
    let prob_path: Option<PathBuf> = ctx.opt(args.prob, "prob")?;
    let mask_path: Option<PathBuf> = ctx.opt(args.mask, "mask")?;
    let (mask, source) = match (prob_path, mask_path) {
        (Some(p), _) => {
            let prob = read_probmaps(&p)?;
            (argmax_mask_scaled(&prob, factor), p)
        }
        (None, Some(m)) => (read_volume(&m)?.into_labels()?, m),
        (None, None) => {
            return Err(Error::Manifest {
                path: String::new(),
                message: "detect needs --prob or --mask".into(),
            })
        }
    };
    let case_id = ctx.get(args.case_id, "case-id", file_stem(&source))?;
    let set = extract_lesions(&mask, &case_id, min_volume)?;
    ctx.info(&format!("case {case_id}: {} lesion instances at f={factor}", set.len()));
    write_output(args.out.as_deref(), &write_detections(&set))?;
    Ok(0)
}

fn cmd_match(args: MatchArgs, ctx: &Ctx) -> Result<i32, Error> {
    let gt = read_detections_file(ctx.require(args.gt, "gt")?)?;
    let pred = read_detections_file(ctx.require(args.pred, "pred")?)?;
    let min_overlap = ctx.get(args.min_overlap, "min-overlap", 1)?;
    let report = match_sets(&gt, &pred, min_overlap)?;
    let t = report.total();
    ctx.info(&format!(
        "case {}: TP={} FL={} FP={} FN={}",
        report.case_id, t.tp, t.fl_gt, t.fp, t.fn_
    ));
    write_output(args.out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
    Ok(0)
}

/// Labels for a shuffle context: the GT mask when present, otherwise the
/// probability argmax at `factor`.
fn context_labels(
    data: &CaseData,
    factor: SensitivityFactor,
) -> Result<liverdet::grid::LabelGrid, Error> {
    match (&data.gt_mask, &data.prob) {
        (Some(gt), _) => Ok(gt.clone()),
        (None, Some(prob)) => Ok(argmax_mask_scaled(prob, factor)),
        (None, None) => Err(Error::Manifest {
            path: data.case_id.clone(),
            message: "case has neither a gt mask nor probability maps".into(),
        }),
    }
}

fn cmd_shuffle(args: ShuffleArgs, ctx: &Ctx) -> Result<i32, Error> {
    let manifest = CaseManifest::load(ctx.require(args.manifest, "manifest")?)?;
    let mode: String = ctx.get(args.mode, "mode", "train".into())?;
    let seed = ctx.get(args.seed, "seed", 0)?;
    let out: PathBuf = ctx.require(args.out, "out")?;
    let mut cfg = ShuffleConfig::default();
    if let Some(s) = ctx.opt(args.patch_dims, "patch-dims")? {
        cfg.patch_dims = parse_dims(&s)?;
    }
    let data = CaseData::load(&manifest)?;
    let labels = context_labels(&data, SensitivityFactor::base())?;
    let dets = match ctx.opt(args.det, "det")? {
        Some(p) => read_detections_file(p)?,
        None => extract_lesions(&labels, &data.case_id, DEFAULT_MIN_VOLUME_CM3)?,
    };
    let sctx = ShuffleContext::new(data.phases.clone(), labels, dets, cfg)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    match mode.as_str() {
        "train" => {
            let per_lesion = ctx.get(args.per_lesion, "per-lesion", 20)?;
            let (patches, errors) = make_training_patches(&sctx, per_lesion, seed);
            for (i, patch) in patches.iter().enumerate() {
                write_patch_bundle(patch, &out.join(format!("patch_{i:05}")))?;
            }
            for e in &errors {
                ctx.warn(&format!("patch skipped: {e}"));
            }
            ctx.info(&format!(
                "wrote {} training patches ({} failures) to {}",
                patches.len(),
                errors.len(),
                out.display()
            ));
        }
        "infer" => {
            let n = ctx.get(args.n, "n", 10)?;
            for det in &sctx.detections.detections.clone() {
                let patches = make_inference_patches(&sctx, det, n, true, seed)?;
                for (i, patch) in patches.iter().enumerate() {
                    let dir =
                        out.join(format!("lesion_{:03}", det.id)).join(format!("patch_{i:02}"));
                    write_patch_bundle(patch, &dir)?;
                }
            }
            ctx.info(&format!(
                "wrote {n} inference patches per lesion for {} lesions to {}",
                sctx.detections.len(),
                out.display()
            ));
        }
        other => {
            return Err(Error::Manifest {
                path: String::new(),
                message: format!("mode must be train or infer, got `{other}`"),
            })
        }
    }
    Ok(0)
}

fn cmd_reclassify(args: ReclassifyArgs, ctx: &Ctx) -> Result<i32, Error> {
    let dets = read_detections_file(ctx.require(args.det, "det")?)?;
    let manifest = CaseManifest::load(ctx.require(args.manifest, "manifest")?)?;
    let kind: SegmenterKind = ctx.require::<String>(args.segmenter, "segmenter")?.parse()?;
    let seed = ctx.get(args.seed, "seed", 0)?;
    let factor = SensitivityFactor::new(ctx.get(args.factor, "factor", 1.0)?)?;
    let cfg = ReclassifyConfig {
        n_patches: ctx.get(args.n, "n", 10)?,
        discard_threshold_cm3: ctx.get(args.threshold, "threshold", 0.5)?,
        skip_volume_cm3: ctx.get(args.skip_volume, "skip-volume", 64.0)?,
        relabel_voting: !args.no_relabel,
        shuffle_in_inference: !args.no_shuffle,
    };
    let mut shuffle_cfg = ShuffleConfig::default();
    if let Some(s) = ctx.opt(args.patch_dims, "patch-dims")? {
        shuffle_cfg.patch_dims = parse_dims(&s)?;
    }

    let data = CaseData::load(&manifest)?;
    // The cropping context comes from the predicted mask when probabilities
    // exist; the GT mask only feeds the mock segmenters.
    let labels = match &data.prob {
        Some(prob) => argmax_mask_scaled(prob, factor),
        None => context_labels(&data, factor)?,
    };
    let sctx = ShuffleContext::new(data.phases.clone(), labels, dets.clone(), shuffle_cfg)?;
    let segmenter = build_segmenter(&kind, data.gt_mask.as_ref(), seed)?;
    let outcome = reclassify_set(&dets, &sctx, segmenter.as_ref(), &cfg, seed)?;
    ctx.info(&format!(
        "case {}: kept {} of {} detections ({} removed)",
        dets.case_id,
        outcome.set.len(),
        dets.len(),
        outcome.removed_ids().len()
    ));
    if let Some(path) = ctx.opt::<PathBuf>(args.records, "records")? {
        std::fs::write(&path, serde_json::to_string_pretty(&outcome.records)?)
            .map_err(|e| Error::io(&path, e))?;
    }
    write_output(args.out.as_deref(), &write_detections(&outcome.set))?;
    Ok(0)
}

fn cmd_classify_patient(args: ClassifyPatientArgs, ctx: &Ctx) -> Result<i32, Error> {
    let dets = read_detections_file(ctx.require(args.det, "det")?)?;
    let class = classify_patient(&dets);
    let payload = serde_json::json!({
        "case_id": dets.case_id,
        "patient_class": class.name(),
    });
    write_output(args.out.as_deref(), &serde_json::to_string_pretty(&payload)?)?;
    Ok(0)
}

#[derive(serde::Serialize)]
struct EvalReport {
    cases: usize,
    tallies: [ClassTally; 6],
    strict: Vec<LesionMetricsRow>,
    table_consistent: Vec<LesionMetricsRow>,
    gt_volume_bins: Vec<VolumeBinRow>,
    patient: PatientMetrics,
}

fn detection_files(path: &Path) -> Result<Vec<PathBuf>, Error> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn cmd_evaluate(args: EvaluateArgs, ctx: &Ctx) -> Result<i32, Error> {
    let gt_path: PathBuf = ctx.require(args.gt, "gt")?;
    let pred_path: PathBuf = ctx.require(args.pred, "pred")?;
    let mode: MetricsMode = ctx.get(args.mode, "mode", "table".into())?.parse()?;
    let min_overlap = ctx.get(args.min_overlap, "min-overlap", 1)?;

    let gt_sets: Vec<DetectionSet> = detection_files(&gt_path)?
        .iter()
        .map(read_detections_file)
        .collect::<Result<_, _>>()?;
    let pred_sets: Vec<DetectionSet> = detection_files(&pred_path)?
        .iter()
        .map(read_detections_file)
        .collect::<Result<_, _>>()?;
    let preds_by_case: BTreeMap<&str, &DetectionSet> =
        pred_sets.iter().map(|s| (s.case_id.as_str(), s)).collect();

    let mut tallies = [ClassTally::default(); 6];
    let mut patient_preds = Vec::new();
    let mut patient_gts = Vec::new();
    let mut paired = 0usize;
    for gt in &gt_sets {
        let Some(pred) = preds_by_case.get(gt.case_id.as_str()) else {
            ctx.warn(&format!("no prediction for case {}", gt.case_id));
            continue;
        };
        let report = match_sets(gt, pred, min_overlap)?;
        MatchReport::accumulate(&mut tallies, &report);
        patient_preds.push(classify_patient(pred));
        patient_gts.push(classify_patient(gt));
        paired += 1;
    }
    if paired == 0 {
        return Err(Error::Manifest {
            path: String::new(),
            message: "no ground-truth/prediction case pairs to evaluate".into(),
        });
    }

    let report = EvalReport {
        cases: paired,
        tallies,
        strict: lesion_metrics_from_tallies(&tallies, MetricsMode::Strict),
        table_consistent: lesion_metrics_from_tallies(&tallies, MetricsMode::TableConsistent),
        gt_volume_bins: stratify_by_volume(&gt_sets.iter().collect::<Vec<_>>()),
        patient: patient_metrics(&patient_preds, &patient_gts, false)?,
    };

    let rows = match mode {
        MetricsMode::Strict => &report.strict,
        MetricsMode::TableConsistent => &report.table_consistent,
    };
    println!("Lesion-level metrics over {} cases:", report.cases);
    print!("{}", render_lesion_table(rows));
    println!();
    println!("Ground-truth lesions by volume (cm3):");
    print!("{}", render_volume_table(&report.gt_volume_bins));
    let p = &report.patient;
    println!();
    println!(
        "Patient-level: sensitivity {} specificity {} accuracy {} (n={})",
        fmt_pct(p.sensitivity),
        fmt_pct(p.specificity),
        fmt_pct(p.accuracy),
        p.n_counted
    );
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)
            .map_err(|e| Error::io(path, e))?;
        ctx.info(&format!("wrote report to {}", path.display()));
    }
    Ok(0)
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(r) => format!("{:.1}%", r * 100.0),
        None => "n/a".into(),
    }
}

fn cmd_pipeline(args: PipelineArgs, ctx: &Ctx) -> Result<i32, Error> {
    let manifest_dir: PathBuf = ctx.require(args.manifest_dir, "manifest-dir")?;
    let out: PathBuf = ctx.require(args.out, "out")?;
    let factors = parse_factors(&ctx.get(args.factors, "factors", "1.0,4.0".into())?)?;
    let kind: SegmenterKind = ctx.get(args.segmenter, "segmenter", "mock:null".into())?.parse()?;
    let jobs = ctx.get(
        args.jobs,
        "jobs",
        std::thread::available_parallelism().map_or(1, |n| n.get()),
    )?;
    let mut shuffle = ShuffleConfig::default();
    if let Some(s) = ctx.opt(args.patch_dims, "patch-dims")? {
        shuffle.patch_dims = parse_dims(&s)?;
    }
    let config = PipelineConfig {
        factors,
        min_volume_cm3: ctx.get(args.min_volume, "min-volume", DEFAULT_MIN_VOLUME_CM3)?,
        min_overlap_voxels: ctx.get(args.min_overlap, "min-overlap", 1)?,
        enable_reclassify: !args.no_reclassify,
        reclassify: ReclassifyConfig {
            n_patches: ctx.get(args.n, "n", 10)?,
            discard_threshold_cm3: ctx.get(args.threshold, "threshold", 0.5)?,
            skip_volume_cm3: ctx.get(args.skip_volume, "skip-volume", 64.0)?,
            relabel_voting: true,
            shuffle_in_inference: !args.no_shuffle,
        },
        shuffle,
        segmenter: kind,
        seed: ctx.get(args.seed, "seed", 0)?,
    };

    let manifests = discover_manifests(&manifest_dir)?;
    if manifests.is_empty() {
        return Err(Error::Manifest {
            path: manifest_dir.display().to_string(),
            message: "no case manifests found".into(),
        });
    }
    ctx.info(&format!("running {} cases on {jobs} workers", manifests.len()));
    let batch = run_batch(&manifests, &config, jobs);

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for result in &batch.results {
        write_case_outputs(result, &out)?;
    }
    for f in &batch.failures {
        ctx.warn(&format!("case {} failed at {}: {}", f.case_id, f.stage, f.error));
    }
    if !batch.failures.is_empty() {
        let path = out.join("failures.json");
        std::fs::write(&path, serde_json::to_string_pretty(&batch.failures)?)
            .map_err(|e| Error::io(&path, e))?;
    }
    if let Some(report) = evaluate_batch(&batch.results) {
        let json_path = out.join("eval_report.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)
            .map_err(|e| Error::io(&json_path, e))?;
        let text = report.render_text();
        let text_path = out.join("eval_report.txt");
        std::fs::write(&text_path, &text).map_err(|e| Error::io(&text_path, e))?;
        print!("{text}");
    }
    ctx.info(&format!(
        "finished: {} ok, {} failed, outputs in {}",
        batch.results.len(),
        batch.failures.len(),
        out.display()
    ));
    Ok(if batch.failures.is_empty() { 0 } else { 2 })
}
