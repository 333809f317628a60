use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flairshift::model_io::load_scan_model;
use flairshift::nifti::load_volume;
use flairshift::signal::{flair_signal, SequenceParams, TissueParams};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flairshift"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const ESTIMATE: &str = r#"
schema_version = 1
output_dir = "model"

[inputs]
flair = "ph/flair.nii.gz"
t1w = "ph/t1w.nii.gz"
tissue_mask = "ph/tissue_mask.nii.gz"
lesion_mask = "ph/lesion_mask.nii.gz"
model = "model"
case_id = "p0"

[sequence]
te_ms = 140
ti_ms = 2800
tr_ms = 11000

[phantom]
dims = [32, 32, 32]
n_lesions = 4
lesion_radius = [1.5, 2.5]
"#;

/// Phantom study plus an estimated model in a fresh directory.
fn study() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, ESTIMATE).unwrap();
    ok(&["-c", "run.toml", "phantom", "-o", "ph"], dir.path());
    ok(&["-c", "run.toml", "estimate"], dir.path());
    (dir, cfg)
}

fn files_in(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().to_string_lossy().ends_with(ext))
        .count()
}

#[test]
fn version_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&["--version"], dir.path());
    assert!(v.starts_with("flairshift "), "{v}");
    let h = ok(&["--help"], dir.path());
    for sub in ["estimate", "simulate", "stress", "sensitivity", "phantom"] {
        assert!(h.contains(sub), "{h}");
    }
}

#[test]
fn phantom_defaults_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["phantom", "-o", "a"], dir.path());
    assert!(out.contains("kappa = 137.5"), "{out}");
    ok(&["phantom", "-o", "b"], dir.path());
    for f in ["flair.nii.gz", "t1w.nii.gz", "tissue_mask.nii.gz", "lesion_mask.nii.gz", "phantom.toml", "truth/manifest.toml"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(load_volume(dir.path().join("a/flair.nii.gz")).unwrap().dims(), [64, 64, 64]);
    let record = fs::read_to_string(dir.path().join("a/phantom.toml")).unwrap();
    assert!(record.contains("kappa = 137.5"));
    ok(&["phantom", "-o", "c", "--seed", "7"], dir.path());
    assert_ne!(fs::read(dir.path().join("a/flair.nii.gz")).unwrap(), fs::read(dir.path().join("c/flair.nii.gz")).unwrap());
}

#[test]
fn estimate_writes_model_and_is_repeatable() {
    let (dir, _) = study();
    let p = dir.path();
    assert!(p.join("model/manifest.toml").exists());
    ok(&["-c", "run.toml", "estimate", "-o", "model2"], p);
    assert_eq!(
        fs::read(p.join("model/manifest.toml")).unwrap(),
        fs::read(p.join("model2/manifest.toml")).unwrap()
    );
    let out = ok(&["-c", "run.toml", "estimate", "-o", "model3"], p);
    assert!(out.contains("kappa = ") && out.contains("fit residual = "), "{out}");

    ok(&["-c", "run.toml", "estimate", "--randomize-tissue", "-o", "r1"], p);
    ok(&["-c", "run.toml", "estimate", "--randomize-tissue", "-o", "r2"], p);
    let report = fs::read_to_string(p.join("r1/build_report.toml")).unwrap();
    assert!(report.contains("mode = \"randomize\""), "{report}");
    assert_eq!(fs::read(p.join("r1/manifest.toml")).unwrap(), fs::read(p.join("r2/manifest.toml")).unwrap());
}

#[test]
fn estimate_rejects_missing_tr() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), ESTIMATE.replace("tr_ms = 11000\n", "")).unwrap();
    let out = run(&["-c", "c.toml", "estimate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sequence.tr_ms"));
}

#[test]
fn config_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "schema_version = 1\n[domain]\nn_te = 7\nnte = 3\n").unwrap();
    let out = run(&["-c", "c.toml", "phantom"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nte") && err.contains("line 4"), "{err}");

    fs::write(dir.path().join("d.toml"), "[stress]\nsafe_drop = -0.5\n").unwrap();
    let out = run(&["-c", "d.toml", "phantom"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stress.safe_drop"));
}

#[test]
fn estimation_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("run.toml"), ESTIMATE).unwrap();
    ok(&["-c", "run.toml", "phantom", "-o", "ph"], p);
    // an empty tissue mask leaves nothing to estimate from
    let flair = load_volume(p.join("ph/flair.nii.gz")).unwrap();
    let empty = flairshift::volume::Mask::zeros(flair.grid().clone());
    flairshift::nifti::save_mask(&empty, p.join("ph/tissue_mask.nii.gz")).unwrap();
    let out = run(&["-c", "run.toml", "estimate"], p);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_baseline_grid_and_ccd() {
    let (dir, _) = study();
    let p = dir.path();
    ok(&["-c", "run.toml", "simulate", "--te", "140", "--ti", "2800", "-o", "base"], p);
    let model = load_scan_model(p.join("model")).unwrap();
    let img = load_volume(p.join("base/p0/te140_ti2800.nii.gz")).unwrap();
    let brain = model.brain_mask().data();
    let peak = model.baseline().data().iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for (i, (&a, &b)) in img.data().iter().zip(model.baseline().data()).enumerate() {
        if brain[i] != 0 {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-6 * peak), "voxel {i}: {a} vs {b}");
        }
    }

    ok(&["-c", "run.toml", "simulate", "--grid", "7x7", "-o", "grid"], p);
    assert_eq!(files_in(&p.join("grid/p0"), ".nii.gz"), 49);
    let manifest = fs::read_to_string(p.join("grid/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 50);
    assert!(manifest.starts_with("case_id,te_ms,ti_ms,tr_ms,path,gt_lesion_path\n"));

    ok(&["-c", "run.toml", "simulate", "--design", "ccd", "-o", "ccd"], p);
    assert_eq!(files_in(&p.join("ccd/p0"), ".nii.gz"), 9);
}

#[test]
fn stress_reports_and_f1_mode_flag() {
    let (dir, _) = study();
    let p = dir.path();
    let out = ok(&["-c", "run.toml", "stress", "--design", "ccd", "-o", "st"], p);
    assert!(out.contains("R^2 = "), "{out}");
    for f in ["samples.csv", "fit_summary.toml", "f1_heatmap.svg", "f1_heatmap.png", "surface_contour.svg", "surface_contour.png"] {
        assert!(p.join("st").join(f).exists(), "{f}");
    }
    let summary = fs::read_to_string(p.join("st/fit_summary.toml")).unwrap();
    assert!(summary.contains("f1_mode = \"lesion_wise\""));
    assert!(summary.contains("r_squared"));

    ok(&["-c", "run.toml", "stress", "--design", "ccd", "--f1-mode", "voxel_wise", "-o", "sv"], p);
    let summary = fs::read_to_string(p.join("sv/fit_summary.toml")).unwrap();
    assert!(summary.contains("f1_mode = \"voxel_wise\""));
}

#[test]
fn failing_predictor_exits_4_and_names_points() {
    let (dir, _) = study();
    let p = dir.path();
    let cfg = format!("{ESTIMATE}\n[predictor]\nkind = \"external_command\"\ncommand_template = \"false {{input}} {{output}}\"\n");
    fs::write(p.join("bad.toml"), cfg).unwrap();
    let out = run(&["-c", "bad.toml", "stress", "--design", "ccd", "-o", "bad"], p);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("p0/te084_ti2200") && err.contains("p0/te150_ti2900"), "{err}");
    let samples = fs::read_to_string(p.join("bad/samples.csv")).unwrap();
    assert_eq!(samples.matches("predictor_failed").count(), 9);
}

#[test]
fn sensitivity_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["sensitivity", "-o", "s", "--n", "20", "--range", "60:180"], p);
    let text = fs::read_to_string(p.join("s/sensitivity.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t_ms,ds_dt1_pct,ds_dt2_pct"));
    let seq = SequenceParams::new(140.0, 2800.0, 11000.0, None).unwrap();
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 20);
    let mut prev = f64::INFINITY;
    for r in &rows {
        let (t2, d1, d2) = (r[0], r[1], r[2]);
        assert!((d2 - 100.0 * 140.0 / (t2 * t2)).abs() <= 1e-12 * d2);
        assert!(d2 < prev);
        prev = d2;
        let tis = |t1: f64, t2: f64| TissueParams::new(1.0, t1, t2).unwrap();
        let s0 = flair_signal(&tis(1007.0, t2), &seq);
        let h = 1e-4 * t2;
        let fd2 = 100.0 * (flair_signal(&tis(1007.0, t2 + h), &seq) - flair_signal(&tis(1007.0, t2 - h), &seq)) / (2.0 * h) / s0;
        let h = 1e-4 * 1007.0;
        let fd1 = 100.0 * (flair_signal(&tis(1007.0 + h, t2), &seq) - flair_signal(&tis(1007.0 - h, t2), &seq)) / (2.0 * h) / s0;
        assert!((d2 - fd2).abs() <= 1e-6 * d2.abs());
        assert!((d1 - fd1).abs() <= 1e-6 * d1.abs().max(1e-3));
    }
    assert!(p.join("s/sensitivity.svg").exists());
}
