use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use flairshift::estimation::{build_scan_model, TissueParamSet};
use flairshift::model_io::{load_scan_model, save_scan_model};
use flairshift::nifti::{load_mask, load_volume, save_mask, save_volume};
use flairshift::phantom::{make_phantom, PhantomConfig};
use flairshift::shift::{design_points, generate_dataset, Case, DatasetOptions, DesignPoint};
use flairshift::signal::{signal_sensitivity, SequenceParams, TissueParams};
use flairshift::stress::{run_stress_test, StressCase, StressOptions};
use flairshift::Error;
use log::info;
use serde::Serialize;

use crate::config::{invalid, Config, SweepParam};
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(invalid("output_dir", format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    Ok(value.as_deref().ok_or_else(|| invalid(key, "is required for this command"))?)
}

pub fn estimate(cfg: &Config) -> Result<(), CliError> {
    let i = &cfg.inputs;
    let flair_path = required(&i.flair, "inputs.flair")?;
    let t1w_path = required(&i.t1w, "inputs.t1w")?;
    let tissue_path = required(&i.tissue_mask, "inputs.tissue_mask")?;
    let lesion_path = required(&i.lesion_mask, "inputs.lesion_mask")?;
    let seq = cfg.sequence.require()?;

    let flair = load_volume(flair_path)?;
    let t1w = load_volume(t1w_path)?;
    let tissue = load_mask(tissue_path)?;
    let lesion = load_mask(lesion_path)?;
    let (model, report) = build_scan_model(
        &flair,
        &t1w,
        &tissue,
        &lesion,
        &seq,
        &cfg.priors,
        &cfg.build_config()?,
    )?;
    create_dir(&cfg.output_dir)?;
    save_scan_model(&model, &cfg.output_dir)?;
    write_toml(&report, &cfg.output_dir.join("build_report.toml"))?;
    println!("kappa = {}", model.kappa());
    println!("fit residual = {:e}", report.contrast_residual);
    println!("max contrast error = {:e}", report.max_contrast_error);
    if !report.dropped.is_empty() {
        let names: Vec<String> = report.dropped.iter().map(|t| t.to_string()).collect();
        println!("contrast terms dropped: {}", names.join(", "));
    }
    println!("model written to {}", cfg.output_dir.display());
    Ok(())
}

fn case_id(cfg: &Config, model_dir: &Path) -> String {
    cfg.inputs.case_id.clone().unwrap_or_else(|| {
        model_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .filter(|n| !n.is_empty() && n != "..")
            .unwrap_or_else(|| "case".into())
    })
}

fn dataset_options(cfg: &Config) -> DatasetOptions {
    DatasetOptions {
        texture_scale: cfg.synthesis.texture_scale,
        composite_skull: cfg.synthesis.composite_skull,
        tr_override: cfg.sequence.tr_ms,
        max_parallel: cfg.max_parallel,
    }
}

pub fn simulate(cfg: &Config, point: Option<(f64, f64)>) -> Result<(), CliError> {
    let model_dir = required(&cfg.inputs.model, "inputs.model")?;
    let model = load_scan_model(model_dir)?;
    let design = match point {
        Some((te, ti)) => vec![DesignPoint::new(te, ti)],
        None => design_points(&cfg.domain.spec(), cfg.domain.design)?,
    };
    let case = Case {
        id: case_id(cfg, model_dir),
        model,
        gt_lesion_path: cfg.inputs.lesion_mask.clone(),
    };
    let rows = generate_dataset(&[case], &design, &cfg.output_dir, &dataset_options(cfg))?;
    println!("{} images written to {}", rows.len(), cfg.output_dir.display());
    Ok(())
}

fn stress_cases(cfg: &Config) -> Result<Vec<StressCase>, CliError> {
    let entries: Vec<(String, PathBuf, PathBuf)> = if cfg.stress.cases.is_empty() {
        let model = required(&cfg.inputs.model, "stress.cases")?;
        let gt = required(&cfg.inputs.lesion_mask, "inputs.lesion_mask")?;
        vec![(case_id(cfg, model), model.to_path_buf(), gt.to_path_buf())]
    } else {
        cfg.stress
            .cases
            .iter()
            .map(|c| (c.id.clone(), c.model.clone(), c.ground_truth.clone()))
            .collect()
    };
    entries
        .into_iter()
        .map(|(id, model, gt)| {
            info!("loading case {id}");
            Ok(StressCase {
                id,
                model: load_scan_model(&model)?,
                gt: load_mask(&gt)?.binarized(),
                gt_path: Some(gt),
            })
        })
        .collect()
}

pub fn stress(cfg: &Config) -> Result<(), CliError> {
    let cases = stress_cases(cfg)?;
    let domain = cfg.domain.spec();
    let design = design_points(&domain, cfg.domain.design)?;
    let s = &cfg.stress;
    let opts = StressOptions {
        f1_mode: s.f1_mode,
        overlap_min: s.overlap_min,
        include_c3: s.include_c3,
        safe_drop: s.safe_drop,
        resolution: s.resolution,
        texture_scale: cfg.synthesis.texture_scale,
        composite_skull: cfg.synthesis.composite_skull,
        max_parallel: cfg.max_parallel,
        baseline: s.baseline_te_ms.zip(s.baseline_ti_ms).map(|(te, ti)| DesignPoint::new(te, ti)),
        wm_threshold: s.wm_threshold,
    };
    let report = run_stress_test(&cases, &design, &domain, &cfg.predictor, &opts, &cfg.output_dir)?;
    println!("design points fitted = {}", report.fit.n_points);
    if !report.dropped_points.is_empty() {
        println!("design points dropped = {}", report.dropped_points.join(", "));
    }
    println!("f1_mode = {}", s.f1_mode);
    println!("R^2 = {}", report.fit.r_squared);
    println!("safe fraction = {}", report.safe.safe_fraction);
    println!("report written to {}", cfg.output_dir.display());
    Ok(())
}

fn baseline_protocol() -> SequenceParams {
    SequenceParams::new(140.0, 2800.0, 11000.0, None).expect("valid protocol")
}

pub fn sensitivity(cfg: &Config) -> Result<(), CliError> {
    let v = &cfg.sensitivity;
    let seq = cfg.sequence.or(&baseline_protocol())?;
    let base = *TissueParamSet::default_init().get(v.tissue);
    let fixed = TissueParams {
        rho: v.rho.unwrap_or(base.rho),
        t1: v.t1_ms.unwrap_or(base.t1),
        t2: v.t2_ms.unwrap_or(base.t2),
    };
    let [lo, hi] = v.range();
    let mut csv = String::from("t_ms,ds_dt1_pct,ds_dt2_pct\n");
    let mut points = Vec::with_capacity(v.n);
    for k in 0..v.n {
        let t = lo + (hi - lo) * k as f64 / (v.n - 1) as f64;
        let mut p = fixed;
        match v.sweep {
            SweepParam::T1 => p.t1 = t,
            SweepParam::T2 => p.t2 = t,
        }
        let s = signal_sensitivity(&p, &seq)?;
        writeln!(csv, "{t},{},{}", s.ds_dt1, s.ds_dt2).expect("string write");
        points.push((t, s.ds_dt1, s.ds_dt2));
    }
    create_dir(&cfg.output_dir)?;
    let csv_path = cfg.output_dir.join("sensitivity.csv");
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
    let svg_path = cfg.output_dir.join("sensitivity.svg");
    let swept = match v.sweep {
        SweepParam::T1 => "T1",
        SweepParam::T2 => "T2",
    };
    fs::write(&svg_path, sensitivity_svg(&points, swept, &v.tissue.to_string(), &seq))
        .map_err(|e| io_err(&svg_path, e))?;
    println!("{} rows written to {}", v.n, csv_path.display());
    Ok(())
}

fn sensitivity_svg(points: &[(f64, f64, f64)], swept: &str, tissue: &str, seq: &SequenceParams) -> String {
    let (w, h, left, top, pw, ph) = (640.0, 420.0, 70.0, 40.0, 520.0, 320.0);
    let (x0, x1) = (points[0].0, points[points.len() - 1].0);
    let ys = points.iter().flat_map(|p| [p.1.abs(), p.2.abs()]);
    let ymax = ys.fold(0.0f64, f64::max).max(1e-12) * 1.05;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + ph - y / ymax * ph;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">|dS/dT| per ms, {tissue} at TE={} TI={} TR={}</text>"#,
        left + pw / 2.0,
        seq.te,
        seq.ti,
        seq.tr
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for k in 0..=4 {
        let x = x0 + (x1 - x0) * k as f64 / 4.0;
        let y = ymax * k as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
            px(x),
            top + ph + 16.0,
            x
        )
        .unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#, left - 6.0, py(y) + 4.0, y).unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{swept} (ms)</text>"#,
        left + pw / 2.0,
        h - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">% signal per ms</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    )
    .unwrap();
    for (row, (label, color)) in [("|dS/dT1|", "#3b528b"), ("|dS/dT2|", "#d95f02")].into_iter().enumerate() {
        let path: Vec<String> = points
            .iter()
            .map(|p| {
                let y = if row == 0 { p.1 } else { p.2 };
                format!("{:.2},{:.2}", px(p.0), py(y.abs()))
            })
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        )
        .unwrap();
        let ly = top + 16.0 + 18.0 * row as f64;
        writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{label}</text>"#,
            left + pw - 110.0,
            left + pw - 85.0,
            left + pw - 80.0,
            ly + 4.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Serialize)]
struct PhantomRecord<'a> {
    tool_version: &'a str,
    kappa: f64,
    config: &'a PhantomConfig,
}

pub fn phantom(cfg: &Config) -> Result<(), CliError> {
    let study = make_phantom(&cfg.phantom)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    save_volume(&study.flair, out.join("flair.nii.gz"))?;
    save_volume(&study.t1w, out.join("t1w.nii.gz"))?;
    save_mask(&study.tissue_mask, out.join("tissue_mask.nii.gz"))?;
    save_mask(&study.lesion_mask, out.join("lesion_mask.nii.gz"))?;
    save_scan_model(&study.truth, out.join("truth"))?;
    // record the lesions actually placed so the file reproduces the study
    let resolved = PhantomConfig {
        lesions: study.lesions.clone(),
        ..cfg.phantom.clone()
    };
    write_toml(
        &PhantomRecord {
            tool_version: flairshift::model_io::TOOL_VERSION,
            kappa: study.truth.kappa(),
            config: &resolved,
        },
        &out.join("phantom.toml"),
    )?;
    println!("kappa = {}", study.truth.kappa());
    println!("lesions = {}", study.lesions.len());
    println!("phantom written to {}", out.display());
    Ok(())
}
