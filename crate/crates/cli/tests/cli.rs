//! Drives the `patchsynth` binary end to end on a tiny synthetic corpus.

use std::path::Path;
use std::process::{Command, Output};

use patchsynth::corpus::{encode_idx_images, encode_idx_labels, IdxImages};
use patchsynth::Image;

fn blob(i: usize, side: usize) -> Image {
    let cx = side as f64 / 2.0 + (i % 5) as f64 - 2.0;
    let cy = side as f64 / 2.0 + (i % 3) as f64 - 1.0;
    let r = 4.0 + (i % 4) as f64;
    Image::from_fn(side, side, |x, y| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        (1.0 - (d - r).max(0.0) / 3.0).clamp(0.0, 1.0)
    })
}

fn run(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchsynth"))
        .arg("--cache")
        .arg(cache)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Ingests a train split from PGM files and a test split from IDX files,
/// then writes a small schedule override.
fn setup(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cache = root.join("cache");
    let pgm_dir = root.join("pgm");
    std::fs::create_dir_all(&pgm_dir).unwrap();
    for i in 0..24 {
        patchsynth::pgm::write(pgm_dir.join(format!("b{i:02}.pgm")), &blob(i, 32)).unwrap();
    }
    let m = ok(&run(&cache, &["ingest", "--pgm-dir", pgm_dir.to_str().unwrap(), "--label", "3", "--split", "train"]));
    assert_eq!(m["image_count"], 24);

    // 28x28 IDX images, padded to 32x32 on ingest
    let n = 12;
    let mut pixels = Vec::new();
    for i in 0..n {
        pixels.extend(blob(i + 7, 28).pixels().iter().map(|v| (v * 255.0).round() as u8));
    }
    let idx = IdxImages {
        count: n,
        rows: 28,
        cols: 28,
        data: pixels,
    };
    std::fs::write(root.join("imgs.idx"), encode_idx_images(&idx)).unwrap();
    std::fs::write(root.join("labels.idx"), encode_idx_labels(&vec![3u8; n])).unwrap();
    ok(&run(
        &cache,
        &[
            "ingest",
            "--images",
            root.join("imgs.idx").to_str().unwrap(),
            "--labels",
            root.join("labels.idx").to_str().unwrap(),
            "--split",
            "test",
        ],
    ));

    let config = root.join("small.json");
    std::fs::write(&config, r#"{"k": 8}"#).unwrap();
    (cache, config)
}

#[test]
fn synth_then_assess() {
    let dir = tempfile::tempdir().unwrap();
    let (cache, config) = setup(dir.path());
    let cfg = config.to_str().unwrap();

    let built = ok(&run(&cache, &["build", "--class", "3", "--config", cfg, "--backend", "kdtree"]));
    assert!(built.is_object() || built.is_array());

    let runs_a = dir.path().join("runs_a");
    let runs_b = dir.path().join("runs_b");
    for out in [&runs_a, &runs_b] {
        let summary = ok(&run(
            &cache,
            &[
                "synth", "--class", "3", "--config", cfg, "--seeds", "test:0..9", "--runs-per-seed", "3", "--root-seed", "99",
                "--out", out.to_str().unwrap(),
            ],
        ));
        assert_eq!(summary["runs"].as_array().unwrap().len(), 30);
        assert_eq!(summary["root_seed_source"], "flag");
    }
    let mut names: Vec<String> = std::fs::read_dir(&runs_a)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 30);
    assert_eq!(names[0], "test-00000-run00");
    // wall time lives in timing.json, everything else must match byte for byte
    for name in &names {
        for f in ["seed.pgm", "final.pgm", "run.json"] {
            let a = std::fs::read(runs_a.join(name).join(f)).unwrap();
            let b = std::fs::read(runs_b.join(name).join(f)).unwrap();
            assert_eq!(a, b, "{name}/{f}");
        }
    }

    let report = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    let summary = ok(&run(
        &cache,
        &[
            "assess",
            "--class",
            "3",
            "--config",
            cfg,
            "--inputs",
            runs_a.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
            "--csv",
            csv.to_str().unwrap(),
            "--spread",
            "--perplexity",
            "5",
        ],
    ));
    assert_eq!(summary["images"], 30);
    let full: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["mean_ll", "mean_originality"] {
        assert!(full["aggregates"][key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert_eq!(full["per_image"].as_array().unwrap().len(), 30);
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() > 30);

    // a different schedule refuses the runs unless forced
    std::fs::write(&config, r#"{"k": 9}"#).unwrap();
    let refused = run(
        &cache,
        &["assess", "--class", "3", "--config", cfg, "--inputs", runs_a.to_str().unwrap(), "--report", report.to_str().unwrap()],
    );
    assert_eq!(refused.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&refused.stderr).unwrap();
    assert_eq!(err["error"], "config");
    ok(&run(
        &cache,
        &[
            "assess", "--class", "3", "--config", cfg, "--inputs", runs_a.to_str().unwrap(), "--report", report.to_str().unwrap(),
            "--force",
        ],
    ));

    // test images chosen by selector, scored on the fully overlapping grid
    let s = ok(&run(
        &cache,
        &["assess", "--class", "3", "--inputs", "test:0..3", "--grid", "full", "--config", cfg, "--report", report.to_str().unwrap()],
    ));
    assert_eq!(s["images"], 4);
}

#[test]
fn errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out = run(&cache, &["build", "--class", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string());

    let out = run(&cache, &["synth", "--class", "3", "--seeds", "test:4..2"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&cache, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}

#[test]
fn schedule_prints_preset() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&run(dir.path(), &["schedule", "--preset", "aligned-face"]));
    assert_eq!(v["name"], "aligned-face");
    assert_eq!(v["layers"].as_array().unwrap().len(), 4);
    let v = ok(&run(dir.path(), &["schedule", "--deterministic"]));
    assert_eq!(v["name"], "mnist-digit");
}
