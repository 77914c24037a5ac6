//! End-to-end tests of the command-line binary: exit-code discipline, flag
//! coverage in --help, determinism under --seed, and the subprocess
//! segmenter protocol.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_liverdet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn gen_cases(dir: &Path, seed: u64, cases: usize) {
    let out = run(&[
        "phantom",
        "gen",
        "--seed",
        &seed.to_string(),
        "--cases",
        &cases.to_string(),
        "--dims",
        "24,64,64",
        "--spacing",
        "2.5,1.5,1.5",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn help_lists_documented_flags() {
    let expected: &[(&str, &[&str])] = &[
        ("detect", &["--prob", "--mask", "--factor", "--min-volume", "--case-id", "--out"]),
        ("match", &["--gt", "--pred", "--min-overlap", "--out"]),
        (
            "shuffle",
            &["--manifest", "--mode", "--det", "--n", "--per-lesion", "--seed", "--out"],
        ),
        (
            "reclassify",
            &[
                "--det",
                "--manifest",
                "--segmenter",
                "--n",
                "--threshold",
                "--skip-volume",
                "--seed",
                "--out",
            ],
        ),
        ("classify-patient", &["--det", "--out"]),
        ("evaluate", &["--gt", "--pred", "--mode", "--report"]),
        (
            "pipeline",
            &["--manifest-dir", "--factors", "--segmenter", "--seed", "--jobs", "--out"],
        ),
    ];
    for (cmd, flags) in expected {
        let out = run(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd} --help");
        let text = stdout(&out);
        for flag in *flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}\n{text}");
        }
        // The global config/debug switches are documented everywhere.
        assert!(text.contains("--config"));
    }
    let top = run(&["phantom", "gen", "--help"]);
    let text = stdout(&top);
    for flag in ["--seed", "--cases", "--dims", "--out"] {
        assert!(text.contains(flag), "phantom gen --help lacks {flag}");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["detect", "--does-not-exist"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stderr(&out);
    assert!(text.contains("Usage") || text.contains("usage"), "{text}");
}

#[test]
fn detect_happy_path_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    gen_cases(dir.path(), 11, 1);
    let prob = dir.path().join("case_0000/prob.nii.gz");
    let out1 = dir.path().join("d1.json");
    let out2 = dir.path().join("d2.json");
    for out in [&out1, &out2] {
        let r = run(&[
            "detect",
            "--prob",
            prob.to_str().unwrap(),
            "--factor",
            "4.0",
            "--case-id",
            "case_0000",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    }
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert_eq!(a, b, "detect output is deterministic");
    let set = liverdet::volio::detjson::read_detections(&String::from_utf8(a).unwrap()).unwrap();
    assert_eq!(set.case_id, "case_0000");
}

#[test]
fn match_reports_dims_mismatch_as_input_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_cases(dir.path().join("a").as_path(), 1, 1);
    let out_a = dir.path().join("a.json");
    let r = run(&[
        "detect",
        "--mask",
        dir.path().join("a/case_0000/gt.nii.gz").to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    // Second set on different dims.
    let out_b = dir.path().join("b.json");
    let r = run(&[
        "phantom",
        "gen",
        "--seed",
        "2",
        "--cases",
        "1",
        "--dims",
        "20,48,48",
        "--spacing",
        "2.5,1.5,1.5",
        "--out",
        dir.path().join("b").to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let r = run(&[
        "detect",
        "--mask",
        dir.path().join("b/case_0000/gt.nii.gz").to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert!(r.status.success());

    let r = run(&[
        "match",
        "--gt",
        out_a.to_str().unwrap(),
        "--pred",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    let text = stderr(&r);
    assert!(
        text.contains("24") && text.contains("20"),
        "error names both dims: {text}"
    );
}

#[test]
fn missing_file_is_input_error() {
    let r = run(&["detect", "--prob", "/nonexistent/p.nii.gz"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn config_file_provides_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    gen_cases(dir.path(), 21, 1);
    let prob = dir.path().join("case_0000/prob.nii.gz");
    let cfg = dir.path().join("liverdet.conf");
    std::fs::write(&cfg, "factor=4.0\ncase-id=from-config\n").unwrap();

    let from_cfg = run(&[
        "detect",
        "--config",
        cfg.to_str().unwrap(),
        "--prob",
        prob.to_str().unwrap(),
    ]);
    assert!(from_cfg.status.success());
    assert!(stdout(&from_cfg).contains("from-config"));

    let overridden = run(&[
        "detect",
        "--config",
        cfg.to_str().unwrap(),
        "--prob",
        prob.to_str().unwrap(),
        "--case-id",
        "from-flag",
    ]);
    assert!(overridden.status.success());
    assert!(stdout(&overridden).contains("from-flag"));

    // Default factor (1.0) vs config factor (4.0) must differ in lesions
    // found for this seed, so check the config was really applied.
    let plain = run(&["detect", "--prob", prob.to_str().unwrap()]);
    assert!(plain.status.success());
    let n_cfg = stdout(&from_cfg).matches("\"label\"").count();
    let n_plain = stdout(&plain).matches("\"label\"").count();
    assert!(n_cfg >= n_plain);
}

#[test]
fn shuffle_writes_patch_bundles() {
    let dir = tempfile::tempdir().unwrap();
    gen_cases(dir.path(), 31, 1);
    let manifest = dir.path().join("case_0000/manifest.json");
    let out = dir.path().join("patches");
    let r = run(&[
        "shuffle",
        "--manifest",
        manifest.to_str().unwrap(),
        "--mode",
        "train",
        "--per-lesion",
        "2",
        "--patch-dims",
        "8,32,32",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let bundles: Vec<PathBuf> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert!(!bundles.is_empty());
    let first = bundles.iter().find(|p| p.ends_with("patch_00000")).unwrap();
    assert!(first.join("index.json").exists());
    assert!(first.join("mask.nii.gz").exists());
    assert!(first.join("image_NC.nii.gz").exists());
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(first.join("index.json")).unwrap())
            .unwrap();
    assert!(index.get("scheme").is_some());
    assert!(index.get("seed").is_some());
    assert!(index.get("origin").is_some());
}

/// The exec segmenter protocol: a shell script that reads the bundle and
/// echoes the reference mask back as its prediction (a perfect segmenter
/// for original patches).
#[test]
fn exec_segmenter_protocol_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    gen_cases(dir.path(), 41, 1);
    let case_dir = dir.path().join("case_0000");
    let det = dir.path().join("det.json");
    let r = run(&[
        "detect",
        "--mask",
        case_dir.join("gt.nii.gz").to_str().unwrap(),
        "--case-id",
        "case_0000",
        "--out",
        det.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));

    let script = dir.path().join("echo_mask.sh");
    std::fs::write(&script, "#!/bin/sh\ncp \"$1/mask.nii.gz\" \"$1/pred_mask.nii.gz\"\n")
        .unwrap();
    let mut perms = std::fs::metadata(&script).unwrap().permissions();
    use std::os::unix::fs::PermissionsExt;
    perms.set_mode(0o755);
    std::fs::set_permissions(&script, perms).unwrap();

    let out = dir.path().join("recls.json");
    let r = run(&[
        "reclassify",
        "--det",
        det.to_str().unwrap(),
        "--manifest",
        case_dir.join("manifest.json").to_str().unwrap(),
        "--segmenter",
        &format!("exec:{}", script.display()),
        "--patch-dims",
        "8,32,32",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let before =
        liverdet::volio::detjson::read_detections_file(&det).unwrap();
    let after = liverdet::volio::detjson::read_detections_file(&out).unwrap();
    // The mask-echo segmenter reproduces every reference mask, so every
    // detection scores its own volume and survives.
    assert_eq!(after.len(), before.len());
    for d in &after.detections {
        if let Some(score) = d.score_cm3 {
            assert!(score > 0.0);
        }
    }
}

#[test]
fn exec_segmenter_nonzero_exit_fails_open_in_reclassify() {
    let dir = tempfile::tempdir().unwrap();
    gen_cases(dir.path(), 51, 1);
    let case_dir = dir.path().join("case_0000");
    let det = dir.path().join("det.json");
    let r = run(&[
        "detect",
        "--mask",
        case_dir.join("gt.nii.gz").to_str().unwrap(),
        "--out",
        det.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let before = liverdet::volio::detjson::read_detections_file(&det).unwrap();
    if before.is_empty() {
        // Nothing to reclassify in this seed; keep the test meaningful
        // by asserting nothing silently changes.
        return;
    }

    let script = dir.path().join("broken.sh");
    std::fs::write(&script, "#!/bin/sh\nexit 9\n").unwrap();
    use std::os::unix::fs::PermissionsExt;
    let mut perms = std::fs::metadata(&script).unwrap().permissions();
    perms.set_mode(0o755);
    std::fs::set_permissions(&script, perms).unwrap();

    let out = dir.path().join("recls.json");
    let records = dir.path().join("records.json");
    let r = run(&[
        "reclassify",
        "--det",
        det.to_str().unwrap(),
        "--manifest",
        case_dir.join("manifest.json").to_str().unwrap(),
        "--segmenter",
        &format!("exec:{}", script.display()),
        "--patch-dims",
        "8,32,32",
        "--out",
        out.to_str().unwrap(),
        "--records",
        records.to_str().unwrap(),
    ]);
    // Reclassification fails open per lesion: the run succeeds, the lesions
    // are retained, and the records name the contract violation.
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let after = liverdet::volio::detjson::read_detections_file(&out).unwrap();
    assert_eq!(after.len(), before.len());
    let recs = std::fs::read_to_string(&records).unwrap();
    assert!(recs.contains("retained-on-error"), "{recs}");
    assert!(recs.contains("contract violation"), "{recs}");
}

#[test]
fn pipeline_outputs_are_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    gen_cases(dir.path().join("cases").as_path(), 61, 2);
    let mut outputs = Vec::new();
    for run_dir in ["o1", "o2"] {
        let out = dir.path().join(run_dir);
        let r = run(&[
            "pipeline",
            "--manifest-dir",
            dir.path().join("cases").to_str().unwrap(),
            "--segmenter",
            "mock:truth",
            "--patch-dims",
            "8,32,32",
            "--seed",
            "17",
            "--jobs",
            if run_dir == "o1" { "1" } else { "4" },
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
        let mut tree = Vec::new();
        collect_files(&out, &mut tree);
        tree.sort();
        let bytes: Vec<(PathBuf, Vec<u8>)> = tree
            .into_iter()
            .map(|p| {
                let rel = p.strip_prefix(&out).unwrap().to_path_buf();
                (rel, std::fs::read(&p).unwrap())
            })
            .collect();
        outputs.push(bytes);
    }
    assert_eq!(outputs[0], outputs[1], "bytes identical across 1 and 4 workers");
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect_files(&p, out);
        } else {
            out.push(p);
        }
    }
}

#[test]
fn evaluate_prints_tables_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    gen_cases(dir.path().join("cases").as_path(), 71, 2);
    let gt_dir = dir.path().join("gt");
    let pred_dir = dir.path().join("pred");
    std::fs::create_dir_all(&gt_dir).unwrap();
    std::fs::create_dir_all(&pred_dir).unwrap();
    for case in ["case_0000", "case_0001"] {
        let mask = dir.path().join("cases").join(case).join("gt.nii.gz");
        for (out_dir, factor) in [(&gt_dir, "1.0"), (&pred_dir, "1.0")] {
            let r = run(&[
                "detect",
                "--mask",
                mask.to_str().unwrap(),
                "--factor",
                factor,
                "--case-id",
                case,
                "--out",
                out_dir.join(format!("{case}.json")).to_str().unwrap(),
            ]);
            assert!(r.status.success());
        }
    }
    let report = dir.path().join("report.json");
    let r = run(&[
        "evaluate",
        "--gt",
        gt_dir.to_str().unwrap(),
        "--pred",
        pred_dir.to_str().unwrap(),
        "--mode",
        "table",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let text = stdout(&r);
    assert!(text.contains("Recall-rough"));
    assert!(text.contains("Patient-level"));
    // Predictions equal ground truth here.
    assert!(text.contains("accuracy 100.0%"), "{text}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json.get("strict").is_some());
    assert!(json.get("table_consistent").is_some());
    assert!(json.get("gt_volume_bins").is_some());
    assert!(json.get("patient").is_some());
}

#[test]
fn bad_segmenter_selector_is_contract_violation() {
    let dir = tempfile::tempdir().unwrap();
    gen_cases(dir.path(), 81, 1);
    let det = dir.path().join("det.json");
    let r = run(&[
        "detect",
        "--mask",
        dir.path().join("case_0000/gt.nii.gz").to_str().unwrap(),
        "--out",
        det.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let r = run(&[
        "reclassify",
        "--det",
        det.to_str().unwrap(),
        "--manifest",
        dir.path().join("case_0000/manifest.json").to_str().unwrap(),
        "--segmenter",
        "magic:wand",
    ]);
    assert_eq!(r.status.code(), Some(3));
}
