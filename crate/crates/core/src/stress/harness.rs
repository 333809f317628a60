use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::ScanModel;
use crate::model_io::TOOL_VERSION;
use crate::nifti::save_mask;
use crate::shift::{generate_dataset, thread_pool, Case, DatasetOptions, DesignPoint, DomainSpec};
use crate::stress::metrics::{lesion_f1, F1Mode};
use crate::stress::plot::write_plots;
use crate::stress::predictor::{run_predictor, PredictorInput, PredictorSpec};
use crate::stress::safe::{safe_region, SafeRegion};
use crate::stress::surface::{evaluate_surface, fit_response_surface, SurfaceFit};
use crate::volume::{Mask, TissueLabel};

/// One baseline study under test.
#[derive(Debug, Clone)]
pub struct StressCase {
    pub id: String,
    pub model: ScanModel,
    pub gt: Mask,
    pub gt_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StressOptions {
    pub f1_mode: F1Mode,
    pub overlap_min: f64,
    pub include_c3: bool,
    pub safe_drop: f64,
    pub resolution: usize,
    pub texture_scale: f64,
    pub composite_skull: bool,
    /// Workers for image synthesis.
    pub max_parallel: usize,
    /// Reference point for the safe region; defaults to the first case's
    /// baseline TE/TI.
    pub baseline: Option<DesignPoint>,
    /// Minimum `PV_WM + PV_Lesion` for a voxel to be searched for lesions.
    pub wm_threshold: f64,
}

impl Default for StressOptions {
    fn default() -> Self {
        StressOptions {
            f1_mode: F1Mode::LesionWise,
            overlap_min: 0.0,
            include_c3: false,
            safe_drop: 0.05,
            resolution: 101,
            texture_scale: 1.0,
            composite_skull: false,
            max_parallel: 1,
            baseline: None,
            wm_threshold: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseF1 {
    pub case_id: String,
    pub f1_lesion: f64,
    pub f1_voxel: f64,
}

/// Per-point aggregate over the cases that were segmented successfully.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Sample {
    pub te: f64,
    pub ti: f64,
    pub id: String,
    pub cases: Vec<CaseF1>,
    /// Mean in the configured F1 mode.
    pub mean_f1: f64,
    pub mean_f1_lesion: f64,
    pub mean_f1_voxel: f64,
}

impl F1Sample {
    pub fn from_cases(point: &DesignPoint, cases: Vec<CaseF1>, mode: F1Mode) -> Self {
        let n = cases.len().max(1) as f64;
        let mean_f1_lesion = cases.iter().map(|c| c.f1_lesion).sum::<f64>() / n;
        let mean_f1_voxel = cases.iter().map(|c| c.f1_voxel).sum::<f64>() / n;
        F1Sample {
            te: point.te,
            ti: point.ti,
            id: point.id.clone(),
            mean_f1: match mode {
                F1Mode::LesionWise => mean_f1_lesion,
                F1Mode::VoxelWise => mean_f1_voxel,
            },
            cases,
            mean_f1_lesion,
            mean_f1_voxel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointFailure {
    pub point_id: String,
    pub case_id: String,
    pub status: &'static str,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct StressTestReport {
    pub samples: Vec<F1Sample>,
    pub dropped_points: Vec<String>,
    pub failures: Vec<PointFailure>,
    pub fit: SurfaceFit,
    pub safe: SafeRegion,
}

pub const SAMPLES_HEADER: &str = "te_ms,ti_ms,case_id,f1_lesion,f1_voxel,status";

/// Voxels where WM plus lesion fill at least `threshold` of the voxel.
pub fn wm_search_region(model: &ScanModel, threshold: f64) -> Result<Mask> {
    let pv = model.pv();
    let wm = pv.fraction(TissueLabel::Wm).data();
    let les = pv.fraction(TissueLabel::Lesion).data();
    let inside = pv.brain_mask().data();
    let data = (0..wm.len())
        .map(|i| u32::from(inside[i] != 0 && wm[i] + les[i] >= threshold))
        .collect();
    Mask::new(pv.brain_mask().grid().clone(), data)
}

fn status_of(e: &Error) -> &'static str {
    match e {
        Error::PredictorTimeout { .. } => "timeout",
        Error::PredictorOutput { .. } => "bad_output",
        _ => "predictor_failed",
    }
}

#[derive(Serialize)]
struct Coefficients {
    c7_intercept: f64,
    c4_te: f64,
    c5_ti: f64,
    c1_te2: f64,
    c2_ti2: f64,
    c6_te_ti: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    c3_te_ti_sq: Option<f64>,
}

#[derive(Serialize)]
struct BaselineEntry {
    te_ms: f64,
    ti_ms: f64,
    f1_fit: f64,
}

#[derive(Serialize)]
struct SafeEntry {
    drop: f64,
    resolution: usize,
    safe_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    te_interval_ms: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ti_interval_ms: Option<[f64; 2]>,
}

#[derive(Serialize)]
struct FitSummary {
    tool_version: &'static str,
    f1_mode: String,
    include_c3: bool,
    n_points: usize,
    r_squared: f64,
    ss_res: f64,
    ss_tot: f64,
    dropped_points: Vec<String>,
    failed_predictions: usize,
    coefficients: Coefficients,
    baseline: BaselineEntry,
    safe_region: SafeEntry,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Synthesizes every design point for every case, segments each image,
/// scores it against the ground truth, fits the response surface and the
/// safe region, and writes `samples.csv`, `fit_summary.toml` and plots into
/// `outdir`.
///
/// Failed predictions are recorded and left out. A design point is dropped
/// when fewer than half of its cases were segmented.
pub fn run_stress_test(
    cases: &[StressCase],
    design: &[DesignPoint],
    domain: &DomainSpec,
    predictor: &PredictorSpec,
    opts: &StressOptions,
    outdir: &Path,
) -> Result<StressTestReport> {
    predictor.validate()?;
    domain.validate()?;
    if cases.is_empty() {
        return Err(Error::param("cases", "at least one case is required"));
    }
    if design.is_empty() {
        return Err(Error::param("domain", "design has no points"));
    }
    if !(0.0..=1.0).contains(&opts.overlap_min) {
        return Err(Error::param("stress.overlap_min", "must lie in [0, 1]"));
    }
    for c in cases {
        c.gt.grid()
            .ensure_matches(c.model.brain_mask().grid(), &format!("ground truth of case {}", c.id))?;
    }
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;

    let image_dir = outdir.join("images");
    let ds_cases: Vec<Case> = cases
        .iter()
        .map(|c| Case {
            id: c.id.clone(),
            model: c.model.clone(),
            gt_lesion_path: c.gt_path.clone(),
        })
        .collect();
    let ds_opts = DatasetOptions {
        texture_scale: opts.texture_scale,
        composite_skull: opts.composite_skull,
        tr_override: None,
        max_parallel: opts.max_parallel,
    };
    let rows = generate_dataset(&ds_cases, design, &image_dir, &ds_opts)?;

    let region_dir = outdir.join("regions");
    fs::create_dir_all(&region_dir).map_err(|e| Error::io(&region_dir, e))?;
    let mut regions = Vec::with_capacity(cases.len());
    for c in cases {
        let r = wm_search_region(&c.model, opts.wm_threshold)?;
        let path = region_dir.join(format!("{}_wm_region.nii.gz", c.id));
        save_mask(&r, &path)?;
        regions.push((r, path));
    }

    // rows are ordered case-major; index them design-major for output
    let jobs: Vec<(usize, usize)> = (0..design.len())
        .flat_map(|p| (0..cases.len()).map(move |c| (p, c)))
        .collect();
    let pool = thread_pool(predictor.max_parallel)?;
    let results: Vec<Result<CaseF1>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, c)| {
                let row = &rows[c * design.len() + p];
                let point = &design[p];
                let label = format!("{}/{}", cases[c].id, point.id);
                let workdir = outdir.join("work").join(&cases[c].id).join(&point.id);
                let input = PredictorInput {
                    point_id: &label,
                    image: &row.path,
                    wm_region: &regions[c].0,
                    wm_region_path: Some(&regions[c].1),
                    workdir: &workdir,
                };
                let pred = run_predictor(predictor, &input)?;
                Ok(CaseF1 {
                    case_id: cases[c].id.clone(),
                    f1_lesion: lesion_f1(&pred, &cases[c].gt, F1Mode::LesionWise, opts.overlap_min)?,
                    f1_voxel: lesion_f1(&pred, &cases[c].gt, F1Mode::VoxelWise, opts.overlap_min)?,
                })
            })
            .collect()
    });

    let mut csv = String::from(SAMPLES_HEADER);
    csv.push('\n');
    let mut samples = Vec::new();
    let mut dropped = Vec::new();
    let mut failures = Vec::new();
    let mut first_error: Option<Error> = None;
    for (p, point) in design.iter().enumerate() {
        let chunk = &results[p * cases.len()..(p + 1) * cases.len()];
        let ok: Vec<CaseF1> = chunk.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
        let keep = 2 * ok.len() >= cases.len() && !ok.is_empty();
        for (c, r) in chunk.iter().enumerate() {
            match r {
                Ok(f) => csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    point.te,
                    point.ti,
                    f.case_id,
                    f.f1_lesion,
                    f.f1_voxel,
                    if keep { "ok" } else { "excluded" }
                )),
                Err(e) => {
                    warn!("{e}");
                    let status = status_of(e);
                    csv.push_str(&format!("{},{},{},,,{status}\n", point.te, point.ti, cases[c].id));
                    failures.push(PointFailure {
                        point_id: point.id.clone(),
                        case_id: cases[c].id.clone(),
                        status,
                        message: e.to_string(),
                    });
                }
            }
        }
        if keep {
            samples.push(F1Sample::from_cases(point, ok, opts.f1_mode));
        } else {
            dropped.push(point.id.clone());
        }
    }
    for (r, _) in results.into_iter().zip(0..) {
        if let Err(e) = r {
            first_error.get_or_insert(e);
        }
    }
    write_text(&outdir.join("samples.csv"), &csv)?;
    if !dropped.is_empty() {
        warn!("design points dropped after predictor failures: {}", dropped.join(", "));
    }
    if samples.is_empty() {
        return Err(first_error.unwrap_or_else(|| Error::FitFailed("no design point produced F1 values".into())));
    }

    let points: Vec<(f64, f64, f64)> = samples.iter().map(|s| (s.te, s.ti, s.mean_f1)).collect();
    let fit = fit_response_surface(&points, opts.include_c3)?;
    let base_seq = cases[0].model.baseline_seq();
    let baseline = opts
        .baseline
        .clone()
        .unwrap_or_else(|| DesignPoint::new(base_seq.te, base_seq.ti));
    let safe = safe_region(&fit, &baseline, opts.safe_drop, domain, opts.resolution)?;

    let c = fit.coefficients;
    let summary = FitSummary {
        tool_version: TOOL_VERSION,
        f1_mode: opts.f1_mode.to_string(),
        include_c3: opts.include_c3,
        n_points: fit.n_points,
        r_squared: fit.r_squared,
        ss_res: fit.ss_res,
        ss_tot: fit.ss_tot,
        dropped_points: dropped.clone(),
        failed_predictions: failures.len(),
        coefficients: Coefficients {
            c7_intercept: c[6],
            c4_te: c[3],
            c5_ti: c[4],
            c1_te2: c[0],
            c2_ti2: c[1],
            c6_te_ti: c[5],
            c3_te_ti_sq: opts.include_c3.then_some(c[2]),
        },
        baseline: BaselineEntry {
            te_ms: baseline.te,
            ti_ms: baseline.ti,
            f1_fit: evaluate_surface(&fit, baseline.te, baseline.ti),
        },
        safe_region: SafeEntry {
            drop: safe.drop,
            resolution: opts.resolution,
            safe_fraction: safe.safe_fraction,
            te_interval_ms: safe.te_interval.map(|(a, b)| [a, b]),
            ti_interval_ms: safe.ti_interval.map(|(a, b)| [a, b]),
        },
    };
    let text = toml::to_string(&summary).map_err(|e| Error::Manifest(e.to_string()))?;
    write_text(&outdir.join("fit_summary.toml"), &text)?;
    write_plots(outdir, &points, &fit, &safe)?;
    info!(
        "stress test: {} points, R² = {:.4}, safe fraction {:.3}",
        samples.len(),
        fit.r_squared,
        safe.safe_fraction
    );

    Ok(StressTestReport {
        samples,
        dropped_points: dropped,
        failures,
        fit,
        safe,
    })
}
