use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stereolab::io::{read_disparity_pfm, read_mask_pgm, write_disparity_pfm, write_image_pfm};
use stereolab::{DisparityMap, Image};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stereolab")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_wall(dir: &Path, z: &str) -> PathBuf {
    let out = dir.join(format!("wall_{z}"));
    ok(&["gen", "--builtin", &format!("wall:{z}"), "--out", p(&out)]);
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Fraction of non-occluded pixels within 1 px; invalid pixels count as misses.
fn within_one(pair: &Path, matched: &Path) -> f64 {
    let gt = read_disparity_pfm(&pair.join("gt_left.pfm")).unwrap();
    let (_, _, occ) = read_mask_pgm(&pair.join("occlusion.pgm")).unwrap();
    let d = read_disparity_pfm(&matched.join("disparity_left.pfm")).unwrap();
    let (_, _, valid) = read_mask_pgm(&matched.join("valid.pgm")).unwrap();
    let mut n = 0;
    let mut hit = 0;
    for k in 0..occ.len() {
        if occ[k] {
            continue;
        }
        n += 1;
        if valid[k] && d.valid()[k] && (d.values()[k] - gt.values()[k]).abs() < 1.0 {
            hit += 1;
        }
    }
    hit as f64 / n as f64
}

#[test]
fn gen_wall_has_constant_ground_truth() {
    let tmp = TempDir::new().unwrap();
    let dir = gen_wall(tmp.path(), "2.0");
    let gt = read_disparity_pfm(&dir.join("gt_left.pfm")).unwrap();
    assert_eq!(gt.valid_count(), 320 * 240);
    assert!(gt.values().iter().all(|d| (d - 25.2).abs() < 1e-5));
    for f in ["left.pfm", "right.pfm", "gt_right.pfm", "occlusion.pgm", "scene.json", "manifest.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
}

#[test]
fn gen_is_byte_identical_for_the_same_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen", "--builtin", "box", "--seed", "42", "--out", p(d), "--threads", "2"]);
    }
    for f in ["left.pfm", "right.pfm", "gt_left.pfm", "gt_right.pfm", "occlusion.pgm", "scene.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["seeds"]["box"], 42);
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["gen", "--builtin", "volcano", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert_eq!(run(&["gen", "--out", p(tmp.path())]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_and_malformed_inputs_are_io_errors() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["match", "--pair", p(&tmp.path().join("nowhere")), "--out", p(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    let bad = tmp.path().join("bad");
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join("left.pfm"), b"P5\nnot a pfm").unwrap();
    fs::write(bad.join("right.pfm"), b"garbage").unwrap();
    let out = run(&["match", "--pair", p(&bad), "--out", p(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn constant_images_are_degenerate() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("flat");
    fs::create_dir_all(&dir).unwrap();
    let img = Image::filled(40, 30, 0.5);
    write_image_pfm(&dir.join("left.pfm"), &img).unwrap();
    write_image_pfm(&dir.join("right.pfm"), &img).unwrap();
    let out = run(&["match", "--pair", p(&dir), "--out", p(&tmp.path().join("m")), "--d-max", "8"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn wall_match_is_accurate_and_beats_photometric() {
    let tmp = TempDir::new().unwrap();
    let pair = gen_wall(tmp.path(), "2.0");
    let (m1, m2) = (tmp.path().join("wlcn"), tmp.path().join("photo"));
    ok(&["match", "--pair", p(&pair), "--out", p(&m1), "--d-max", "63"]);
    ok(&["match", "--pair", p(&pair), "--out", p(&m2), "--d-max", "63", "--photometric"]);
    let (good, base) = (within_one(&pair, &m1), within_one(&pair, &m2));
    assert!(good >= 0.95, "wlcn+asw within 1 px: {good}");
    assert!(base < good, "photometric {base} vs wlcn {good}");

    // every file written is in the manifest
    let manifest = json(&m1.join("manifest.json"));
    let listed: Vec<String> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    for entry in fs::read_dir(&m1).unwrap() {
        let path = entry.unwrap().path();
        assert!(listed.contains(&path.to_string_lossy().into_owned()), "{path:?} not listed");
    }
    assert_eq!(manifest["config"]["d_max"], 63);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let pair = gen_wall(tmp.path(), "2.0");
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"d_max": 40, "lr_theta": 2.0}"#).unwrap();
    let out = tmp.path().join("m");
    ok(&["match", "--pair", p(&pair), "--out", p(&out), "--config", p(&cfg), "--d-max", "50"]);
    let echo = json(&out.join("config.json"));
    assert_eq!(echo["d_max"], 50);
    assert_eq!(echo["lr_theta"], 2.0);
}

#[test]
fn match_output_does_not_depend_on_threads() {
    let tmp = TempDir::new().unwrap();
    let pair = gen_wall(tmp.path(), "1.5");
    let (a, b) = (tmp.path().join("t1"), tmp.path().join("t3"));
    ok(&["match", "--pair", p(&pair), "--out", p(&a), "--d-max", "48", "--threads", "1"]);
    ok(&["match", "--pair", p(&pair), "--out", p(&b), "--d-max", "48", "--threads", "3"]);
    for f in ["disparity_left.pfm", "disparity_right.pfm", "valid.pgm"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn refinement_writes_an_objective_trace() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("small");
    let mut spec = stereolab::synth::wall_scene(2.0);
    spec.width = 96;
    spec.height = 64;
    fs::create_dir_all(&dir).unwrap();
    let sp = tmp.path().join("scene.json");
    fs::write(&sp, serde_json::to_string(&spec).unwrap()).unwrap();
    ok(&["gen", "--spec", p(&sp), "--out", p(&dir)]);
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"d_max": 40, "aggregation": {"kind": "asw", "half_window": 4, "sigma_w_8bit": 2.0},
            "refinement": {"kind": "gd", "steps": 5}}"#,
    )
    .unwrap();
    let out = tmp.path().join("m");
    ok(&["match", "--pair", p(&dir), "--out", p(&out), "--config", p(&cfg)]);
    let trace = fs::read_to_string(out.join("trace_left.csv")).unwrap();
    assert!(trace.lines().count() >= 2, "{trace}");
}

#[test]
fn eval_of_perfect_prediction_has_zero_bias() {
    let tmp = TempDir::new().unwrap();
    let pair = gen_wall(tmp.path(), "1.0");
    let pred = tmp.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    fs::copy(pair.join("gt_left.pfm"), pred.join("disparity_left.pfm")).unwrap();
    let report = tmp.path().join("report.json");
    ok(&["eval", "--pred", p(&pred), "--gt", p(&pair), "--out", p(&report)]);
    let r = json(&report);
    assert_eq!(r["schema_version"], 1);
    let row = &r["per_distance"][0];
    assert!(row["bias_m"].as_f64().unwrap().abs() < 1e-9, "{row}");
    assert!(row["jitter_m"].as_f64().unwrap().abs() < 1e-9, "{row}");
    assert_eq!(r["error_curve"][0]["fraction"], 1.0);
    assert!(tmp.path().join("report.manifest.json").exists());
}

#[test]
fn eval_of_the_battery_fits_the_error_law() {
    let tmp = TempDir::new().unwrap();
    let gt = tmp.path().join("battery");
    ok(&["gen", "--battery", "--out", p(&gt)]);
    let pred = tmp.path().join("pred");
    for entry in fs::read_dir(&gt).unwrap() {
        let dir = entry.unwrap().path();
        if !dir.is_dir() {
            continue;
        }
        let target = pred.join(dir.file_name().unwrap());
        fs::create_dir_all(&target).unwrap();
        // +/- a quarter pixel in a checkerboard: the fitted plane stays put and
        // every pixel is off by 0.25 px
        let d = read_disparity_pfm(&dir.join("gt_left.pfm")).unwrap();
        let w = d.width();
        let shifted: Vec<f64> = d
            .values()
            .iter()
            .enumerate()
            .map(|(k, v)| if (k / w + k % w) % 2 == 0 { v + 0.25 } else { v - 0.25 })
            .collect();
        let d = DisparityMap::new(d.width(), d.height(), shifted, d.valid().to_vec()).unwrap();
        write_disparity_pfm(&target.join("disparity_left.pfm"), &d).unwrap();
    }
    let (report, csv) = (tmp.path().join("r.json"), tmp.path().join("r.csv"));
    ok(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&report), "--csv", p(&csv)]);
    let r = json(&report);
    assert_eq!(r["per_distance"].as_array().unwrap().len(), 7);
    let delta = r["delta_px"].as_f64().unwrap();
    assert!((delta - 0.25).abs() < 0.01, "delta {delta}");
    assert!((r["loglog_slope"].as_f64().unwrap() - 2.0).abs() < 0.05);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 8);
}

#[test]
fn eval_rejects_mismatched_sizes() {
    let tmp = TempDir::new().unwrap();
    let pair = gen_wall(tmp.path(), "2.0");
    let pred = tmp.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    write_disparity_pfm(&pred.join("disparity_left.pfm"), &DisparityMap::constant(10, 10, 3.0)).unwrap();
    let out = run(&["eval", "--pred", p(&pred), "--gt", p(&pair), "--out", p(&tmp.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn landscape_writes_one_row_per_pixel_and_plane() {
    let tmp = TempDir::new().unwrap();
    let pair = gen_wall(tmp.path(), "2.0");
    let out = tmp.path().join("curves.csv");
    ok(&[
        "landscape", "--pair", p(&pair), "--pixel", "120,160", "--pixel", "60,250", "--d-max", "39",
        "--single-pixel", "--out", p(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "row,col,disparity,cost,valid,gt_disparity");
    assert_eq!(lines.len(), 1 + 2 * 40);
    let out = run(&["landscape", "--pair", p(&pair), "--pixel", "999,1", "--out", p(&out)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_reports_identical_outputs_across_threads() {
    let out = ok(&["bench", "--width", "96", "--height", "64", "--d-max", "31", "--compare-threads", "1,2"]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["identical_across_threads"], true);
    assert_eq!(r["thread_runs"].as_array().unwrap().len(), 2);
    assert!(r["total_seconds"].as_f64().unwrap() > 0.0);
}
