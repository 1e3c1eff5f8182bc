use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bnseg::evaluation::{synth_image, SynthSpec};
use bnseg::pipeline::{strip_timing, REPORT_SCHEMA};
use bnseg::raster::{self, GrayImage};
use serde_json::{json, Value};

fn bnseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(
        text.trim_end().lines().count(),
        1,
        "one diagnostic line: {text}"
    );
    serde_json::from_str(text.trim_end()).expect("stderr is JSON")
}

/// Two-region image (left dark, right bright) with its truth map.
fn two_region(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = SynthSpec::three_regions(64, 48, [50, 190, 190]);
    let (img, truth) = synth_image(&spec, 8.0, 1).unwrap();
    let input = dir.join("two.png");
    raster::save_png_gray(&img, &input).unwrap();
    let gt = dir.join("two_gt.png");
    let levels = truth.labels().iter().map(|&l| l as u8 * 100).collect();
    raster::save_png_gray(&GrayImage::new(64, 48, levels).unwrap(), &gt).unwrap();
    (input, gt)
}

fn resolved(dir: &Path, args: &[&str]) -> Value {
    let mut all = vec!["run", "--dry-run"];
    all.extend_from_slice(args);
    stdout_json(&bnseg(dir, &all))
}

#[test]
fn flags_override_config_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("model.json"),
        r#"{"centers":[10,200],"sigmas":[5,5]}"#,
    )
    .unwrap();
    // (config key, value in the file, flag, flag value, expected from flag, default)
    let cases: Vec<(&str, Value, &str, &str, Value, Value)> = vec![
        (
            "superpixels",
            json!(50),
            "--superpixels",
            "80",
            json!(80),
            json!(200),
        ),
        ("classes", json!(3), "--classes", "4", json!(4), json!(2)),
        (
            "sigma",
            json!([20.0, 30.0]),
            "--sigma",
            "40",
            json!(40.0),
            json!(50.0),
        ),
        ("t1", json!(5.0), "--t1", "7", json!(7.0), json!(15.0)),
        ("t2", json!(50.0), "--t2", "60", json!(60.0), json!(30.0)),
        (
            "predicates",
            json!(["p2"]),
            "--predicates",
            "p1",
            json!(["p1"]),
            json!(["p1", "p2"]),
        ),
        (
            "inference",
            json!("icm"),
            "--inference",
            "decomp",
            json!("decomp"),
            json!("combined"),
        ),
        (
            "init",
            json!("threshold"),
            "--init",
            "threshold",
            json!("threshold"),
            json!("threshold"),
        ),
        (
            "stop_fraction",
            json!(0.2),
            "--stop-frac",
            "0.3",
            json!(0.3),
            json!(0.1),
        ),
        (
            "max_sweeps",
            json!(5),
            "--max-sweeps",
            "6",
            json!(6),
            json!(20),
        ),
        ("seed", json!(3), "--seed", "4", json!(4), json!(0)),
        (
            "ground_truth",
            json!("a.png"),
            "--ground-truth",
            "b.png",
            json!("b.png"),
            json!(null),
        ),
        (
            "baseline",
            json!("otsu"),
            "--baseline",
            "sauvola",
            json!("sauvola"),
            json!(null),
        ),
        (
            "balance",
            json!(0.25),
            "--balance",
            "0.75",
            json!(0.75),
            json!(0.5),
        ),
        (
            "bandwidth",
            json!(20.0),
            "--bandwidth",
            "40",
            json!(40.0),
            json!(30.0),
        ),
        (
            "pin_model",
            json!("model.json"),
            "--pin-model",
            "other.json",
            json!("other.json"),
            json!(null),
        ),
        (
            "palette",
            json!([[1, 2, 3]]),
            "--palette",
            "[[4,5,6]]",
            json!([[4, 5, 6]]),
            json!(null),
        ),
        (
            "overlay",
            json!(false),
            "--overlay",
            "",
            json!(true),
            json!(false),
        ),
    ];
    for (key, file_value, flag, flag_value, expected, default) in cases {
        let defaults = resolved(d, &["img.png"]);
        assert_eq!(defaults["config"][key], default, "default {key}");

        let cfg_path = d.join(format!("{key}.json"));
        let mut file = json!({ "input": "img.png" });
        file[key] = file_value.clone();
        fs::write(&cfg_path, file.to_string()).unwrap();
        let cfg_arg = cfg_path.to_str().unwrap();
        let from_file = resolved(d, &["--config", cfg_arg]);
        let mut want = file_value.clone();
        if matches!(key, "ground_truth" | "pin_model") {
            // Relative paths in a config file resolve against its directory.
            want = json!(d.join(file_value.as_str().unwrap()).to_str().unwrap());
        }
        assert_eq!(from_file["config"][key], want, "file {key}");

        let mut args = vec!["--config", cfg_arg, flag];
        if !flag_value.is_empty() {
            args.push(flag_value);
        }
        let from_flag = resolved(d, &args);
        assert_eq!(from_flag["config"][key], expected, "flag {key}");
    }

    // Input and output root follow the same order.
    fs::write(d.join("io.json"), r#"{"input":"a.png","out":"res"}"#).unwrap();
    let io = d.join("io.json");
    let io = io.to_str().unwrap();
    let file_only = resolved(d, &["--config", io]);
    assert_eq!(
        file_only["config"]["input"],
        json!(d.join("a.png").to_str().unwrap())
    );
    assert_eq!(file_only["out"], json!(d.join("res").to_str().unwrap()));
    let flagged = resolved(d, &["--config", io, "b.png", "--out", "elsewhere"]);
    assert_eq!(flagged["config"]["input"], json!("b.png"));
    assert_eq!(flagged["out"], json!("elsewhere"));
    assert_eq!(resolved(d, &["x.png"])["out"], json!("out"));
}

#[test]
fn uniform_image_is_a_clustering_error() {
    let dir = tempfile::tempdir().unwrap();
    raster::save_png_gray(
        &GrayImage::filled(16, 16, 77).unwrap(),
        dir.path().join("flat.png"),
    )
    .unwrap();
    let err = stderr_json(&bnseg(dir.path(), &["run", "flat.png"]));
    assert_eq!(err["error"], "clustering");
    assert!(err["message"].as_str().unwrap().contains("distinct"));
}

#[test]
fn errors_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let missing = stderr_json(&bnseg(dir.path(), &["run", "nope.png"]));
    assert_eq!(missing["error"], "io");
    let bad_alg = stderr_json(&bnseg(
        dir.path(),
        &["run", "x.png", "--inference", "annealing"],
    ));
    assert_eq!(bad_alg["error"], "configuration");
    let bad_flag = stderr_json(&bnseg(dir.path(), &["run", "--superpixels", "many"]));
    assert_eq!(bad_flag["error"], "usage");
    fs::write(
        dir.path().join("c.json"),
        r#"{"input":"x.png","superpixel":3}"#,
    )
    .unwrap();
    let bad_key = stderr_json(&bnseg(dir.path(), &["run", "--config", "c.json"]));
    assert_eq!(bad_key["error"], "configuration");
    let no_input = stderr_json(&bnseg(dir.path(), &["run"]));
    assert_eq!(no_input["error"], "configuration");
}

fn png_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    names
}

#[test]
fn two_region_run_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let (input, _) = two_region(dir.path());
    let summary = stdout_json(&bnseg(dir.path(), &["run", input.to_str().unwrap()]));
    let run_dir = dir.path().join(summary["run_dir"].as_str().unwrap());
    assert_eq!(png_files(&run_dir), vec!["labels.png".to_string()]);
    let report: Value =
        serde_json::from_slice(&fs::read(run_dir.join("report.json")).unwrap()).unwrap();
    assert!(report["trace"].is_object());
    assert_eq!(report["trace"]["algorithm"], "combined");
    assert_eq!(report["model"]["centers"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "image,algorithm,n,k,accuracy,seconds,sweeps"
    );
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn identical_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (input, gt) = two_region(dir.path());
    let args = |out: &'static str| {
        vec![
            "run".to_string(),
            input.to_str().unwrap().to_string(),
            "--ground-truth".into(),
            gt.to_str().unwrap().into(),
            "--overlay".into(),
            "--seed".into(),
            "9".into(),
            "--out".into(),
            out.into(),
        ]
    };
    let run = |out| {
        let a = args(out);
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        let s = stdout_json(&bnseg(dir.path(), &a));
        dir.path().join(s["run_dir"].as_str().unwrap())
    };
    let (first, second) = (run("one"), run("two"));
    assert_eq!(first.file_name(), second.file_name());
    for f in ["labels.png", "overlay.png", "superpixels.pgm"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
    let report = |d: &Path| {
        let mut v: Value =
            serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
        strip_timing(&mut v);
        v
    };
    assert_eq!(report(&first), report(&second));
}

#[test]
fn reports_match_the_published_schema() {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let dir = tempfile::tempdir().unwrap();
    let (input, gt) = two_region(dir.path());
    let input = input.to_str().unwrap();
    let gt = gt.to_str().unwrap();
    let variants: Vec<Vec<&str>> = vec![
        vec!["run", input],
        vec![
            "run",
            input,
            "--ground-truth",
            gt,
            "--baseline",
            "otsu",
            "--overlay",
        ],
        vec![
            "run",
            input,
            "--ground-truth",
            gt,
            "--baseline",
            "niblack",
            "--inference",
            "icm",
        ],
        vec![
            "run",
            input,
            "--sigma",
            "30,60",
            "--predicates",
            "none",
            "--inference",
            "decomp",
            "--palette",
            "[[0,0,0],[255,255,255]]",
        ],
    ];
    for args in variants {
        let s = stdout_json(&bnseg(dir.path(), &args));
        let path = dir
            .path()
            .join(s["run_dir"].as_str().unwrap())
            .join("report.json");
        let report: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
        let errors: Vec<String> = validator
            .iter_errors(&report)
            .map(|e| e.to_string())
            .collect();
        assert!(errors.is_empty(), "{args:?}: {errors:?}");
    }
    // The schema rejects a report with a missing trace.
    let s = stdout_json(&bnseg(dir.path(), &["run", input]));
    let path = dir
        .path()
        .join(s["run_dir"].as_str().unwrap())
        .join("report.json");
    let mut report: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    report.as_object_mut().unwrap().remove("trace");
    assert!(!validator.is_valid(&report));
}

#[test]
fn schema_subcommand_prints_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = bnseg(dir.path(), &["schema"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), REPORT_SCHEMA);
}

#[test]
fn pinned_model_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (input, _) = two_region(dir.path());
    let input = input.to_str().unwrap();
    let first = stdout_json(&bnseg(dir.path(), &["run", input, "--seed", "1"]));
    let first_dir = dir.path().join(first["run_dir"].as_str().unwrap());
    let report = first_dir.join("report.json");
    let second = stdout_json(&bnseg(
        dir.path(),
        &[
            "run",
            input,
            "--seed",
            "2",
            "--pin-model",
            report.to_str().unwrap(),
        ],
    ));
    assert_eq!(first["centers"], second["centers"]);
    let second_dir = dir.path().join(second["run_dir"].as_str().unwrap());
    assert_eq!(
        fs::read(first_dir.join("labels.png")).unwrap(),
        fs::read(second_dir.join("labels.png")).unwrap()
    );
}

#[test]
fn suite_marks_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (input, gt) = two_region(d);
    fs::write(
        d.join("good.json"),
        json!({ "input": input, "ground_truth": gt, "superpixels": 40 }).to_string(),
    )
    .unwrap();
    fs::write(
        d.join("bad.json"),
        json!({ "input": "missing.png" }).to_string(),
    )
    .unwrap();
    let summary = stdout_json(&bnseg(
        d,
        &[
            "suite",
            "good.json",
            "bad.json",
            "--workers",
            "2",
            "--out",
            "res",
        ],
    ));
    assert_eq!(summary["runs"], 2);
    assert_eq!(summary["failures"], 1);
    let csv = fs::read_to_string(d.join("res").join("suite.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "image,algorithm,n,k,accuracy,seconds,sweeps,status"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("two.png,combined,") && lines[1].ends_with(",ok"));
    assert!(lines[2].starts_with("missing.png,combined,") && lines[2].contains("error: io"));
    assert!(lines[3].starts_with("mean,combined,"));
}

#[test]
fn suite_over_a_directory_compares_algorithms() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    fs::create_dir(&images).unwrap();
    for seed in 0..2u64 {
        let spec = SynthSpec::random_blocks(48, 48, &[40, 120, 200], seed);
        let (img, truth) = synth_image(&spec, 8.0, seed).unwrap();
        raster::save_pgm(&img, images.join(format!("s{seed}.pgm"))).unwrap();
        let gray = truth.labels().iter().map(|&l| l as u8).collect();
        raster::save_pgm(
            &GrayImage::new(48, 48, gray).unwrap(),
            images.join(format!("s{seed}.gt.pgm")),
        )
        .unwrap();
    }
    let summary = stdout_json(&bnseg(
        dir.path(),
        &[
            "suite",
            "images",
            "--classes",
            "3",
            "--superpixels",
            "60",
            "--algorithms",
            "icm,decomp,combined",
            "--out",
            "res",
        ],
    ));
    assert_eq!(summary["runs"], 6);
    assert_eq!(summary["failures"], 0);
    let means = summary["means"].as_array().unwrap();
    assert_eq!(means.len(), 3);
    assert!(means.iter().all(|m| m["accuracy"].as_f64().unwrap() > 0.9));
}

#[test]
fn synth_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bnseg(
        d,
        &[
            "synth", "--width", "64", "--height", "64", "--noise", "0", "--out", "s.pgm",
            "--truth", "t.png",
        ],
    );
    assert!(out.status.success());
    let img = raster::load_gray(d.join("s.pgm")).unwrap();
    assert_eq!(img.get(0, 0), 40);
    assert_eq!(img.get(63, 63), 200);
    assert_eq!(
        raster::load_label_map(d.join("t.png")).unwrap().max_label(),
        3
    );
    let bench = stdout_json(&bnseg(
        d,
        &["bench", "s.pgm", "--classes", "3", "--counts", "20,40"],
    ));
    let rows = bench["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["seconds"].as_f64().unwrap() > 0.0));
    let bad = stderr_json(&bnseg(
        d,
        &["synth", "--intensities", "1,2", "--out", "x.png"],
    ));
    assert_eq!(bad["error"], "configuration");
}
