//! Forward synthesis of acquisition-shifted FLAIR images and the design
//! grids they are sampled on.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{mixture_signal, ScanModel};
use crate::nifti::save_volume;
use crate::signal::SequenceParams;
use crate::volume::{Mask, Volume};

/// One (TE, TI) node of an experimental design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub te: f64,
    pub ti: f64,
    pub id: String,
}

fn format_ms(v: f64, width: usize) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    let int: i64 = int.parse().unwrap_or(0);
    if frac.is_empty() {
        format!("{int:0width$}")
    } else {
        format!("{int:0width$}p{frac}")
    }
}

impl DesignPoint {
    /// Id of the form `te140_ti2800`; fractional values use `p` for the
    /// decimal point and are rounded to 3 decimals (`te117p5_ti2316p667`).
    pub fn new(te: f64, ti: f64) -> Self {
        DesignPoint {
            te,
            ti,
            id: format!("te{}_ti{}", format_ms(te, 3), format_ms(ti, 4)),
        }
    }

    /// Sequence with this point's TE/TI and the given TR and TE_last.
    pub fn sequence(&self, base: &SequenceParams) -> Result<SequenceParams> {
        base.with_te_ti(self.te, self.ti)
    }
}

/// Rectangular (TE, TI) domain with per-axis sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub te_min_ms: f64,
    pub te_max_ms: f64,
    pub ti_min_ms: f64,
    pub ti_max_ms: f64,
    pub n_te: usize,
    pub n_ti: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            te_min_ms: 84.0,
            te_max_ms: 150.0,
            ti_min_ms: 2200.0,
            ti_max_ms: 2900.0,
            n_te: 7,
            n_ti: 7,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.te_min_ms, self.te_max_ms, self.ti_min_ms, self.ti_max_ms]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::param("domain", "bounds must be finite"));
        }
        if !(self.te_min_ms > 0.0 && self.te_min_ms < self.te_max_ms) {
            return Err(Error::param(
                "domain.te_min_ms",
                format!("require 0 < te_min_ms < te_max_ms, got [{}, {}]", self.te_min_ms, self.te_max_ms),
            ));
        }
        if !(self.ti_min_ms > 0.0 && self.ti_min_ms < self.ti_max_ms) {
            return Err(Error::param(
                "domain.ti_min_ms",
                format!("require 0 < ti_min_ms < ti_max_ms, got [{}, {}]", self.ti_min_ms, self.ti_max_ms),
            ));
        }
        if self.n_te < 2 {
            return Err(Error::param("domain.n_te", format!("must be >= 2, got {}", self.n_te)));
        }
        if self.n_ti < 2 {
            return Err(Error::param("domain.n_ti", format!("must be >= 2, got {}", self.n_ti)));
        }
        Ok(())
    }

    pub fn te_center(&self) -> f64 {
        0.5 * (self.te_min_ms + self.te_max_ms)
    }

    pub fn ti_center(&self) -> f64 {
        0.5 * (self.ti_min_ms + self.ti_max_ms)
    }
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| {
                if k == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Full factorial grid, TE outer and TI inner.
pub fn design_grid(spec: &DomainSpec) -> Result<Vec<DesignPoint>> {
    spec.validate()?;
    let tis = linspace(spec.ti_min_ms, spec.ti_max_ms, spec.n_ti);
    Ok(linspace(spec.te_min_ms, spec.te_max_ms, spec.n_te)
        .into_iter()
        .flat_map(|te| tis.iter().map(move |&ti| DesignPoint::new(te, ti)))
        .collect())
}

/// Face-centred central composite design: corners, face centres and the
/// centre, in the same TE-outer order as [`design_grid`].
pub fn design_ccd(spec: &DomainSpec) -> Result<Vec<DesignPoint>> {
    spec.validate()?;
    let tes = [spec.te_min_ms, spec.te_center(), spec.te_max_ms];
    let tis = [spec.ti_min_ms, spec.ti_center(), spec.ti_max_ms];
    Ok(tes
        .iter()
        .flat_map(|&te| tis.iter().map(move |&ti| DesignPoint::new(te, ti)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    #[default]
    Grid,
    Ccd,
}

pub fn design_points(spec: &DomainSpec, kind: DesignKind) -> Result<Vec<DesignPoint>> {
    match kind {
        DesignKind::Grid => design_grid(spec),
        DesignKind::Ccd => design_ccd(spec),
    }
}

/// Synthesized image `kappa * (sum_t PV_t S_t + texture_scale * S_Tex)`,
/// clamped at zero inside the brain and zero outside.
pub fn synthesize(model: &ScanModel, seq: &SequenceParams, texture_scale: f64) -> Result<Volume> {
    seq.validate()?;
    if !texture_scale.is_finite() {
        return Err(Error::param("texture_scale", "must be finite"));
    }
    let mix = mixture_signal(model.pv(), model.params(), seq);
    let tex = model.texture().data();
    let inside = model.brain_mask().data();
    let kappa = model.kappa();
    let data = (0..mix.len())
        .map(|i| {
            if inside[i] == 0 {
                0.0
            } else {
                (kappa * (mix[i] + texture_scale * tex[i])).max(0.0)
            }
        })
        .collect();
    Volume::new(model.brain_mask().grid().clone(), data)
}

/// `sim` inside the brain, `baseline` elsewhere.
pub fn composite_with_skull(sim: &Volume, baseline: &Volume, brain_mask: &Mask) -> Result<Volume> {
    sim.grid().ensure_matches(baseline.grid(), "simulated vs baseline")?;
    sim.grid().ensure_matches(brain_mask.grid(), "simulated vs brain mask")?;
    let data = sim
        .data()
        .iter()
        .zip(baseline.data())
        .zip(brain_mask.data())
        .map(|((&s, &b), &m)| if m != 0 { s } else { b })
        .collect();
    Volume::new(sim.grid().clone(), data)
}

/// A scan model together with its case id and ground-truth lesion mask.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub model: ScanModel,
    pub gt_lesion_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetOptions {
    pub texture_scale: f64,
    pub composite_skull: bool,
    /// Replaces the baseline TR when set.
    pub tr_override: Option<f64>,
    pub max_parallel: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            texture_scale: 1.0,
            composite_skull: false,
            tr_override: None,
            max_parallel: 1,
        }
    }
}

/// One row of the dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub case_id: String,
    pub te_ms: f64,
    pub ti_ms: f64,
    pub tr_ms: f64,
    pub path: PathBuf,
    pub gt_lesion_path: Option<PathBuf>,
}

pub const MANIFEST_HEADER: &str = "case_id,te_ms,ti_ms,tr_ms,path,gt_lesion_path";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes the manifest CSV. Image paths inside the manifest's directory are
/// stored relative to it so the dataset can be moved as a whole.
pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in rows {
        let gt = r.gt_lesion_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&r.case_id),
            r.te_ms,
            r.ti_ms,
            r.tr_ms,
            csv_field(&r.path.strip_prefix(dir).unwrap_or(&r.path).display().to_string()),
            csv_field(&gt)
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a manifest written by [`write_manifest`] (plain, unquoted fields).
/// Relative image paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Manifest(format!("{}: unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Manifest(format!("malformed row `{l}`")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Manifest(format!("bad number `{s}` in row `{l}`")))
            };
            Ok(ManifestRow {
                case_id: f[0].to_string(),
                te_ms: num(f[1])?,
                ti_ms: num(f[2])?,
                tr_ms: num(f[3])?,
                path: dir.join(f[4]),
                gt_lesion_path: (!f[5].is_empty()).then(|| PathBuf::from(f[5])),
            })
        })
        .collect()
}

pub(crate) fn thread_pool(max_parallel: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(max_parallel.max(1))
        .build()
        .map_err(|e| Error::param("max_parallel", e.to_string()))
}

/// Writes `<outdir>/<case>/<point id>.nii.gz` for every case and design
/// point plus `<outdir>/manifest.csv`. Rows are ordered by case, then design
/// order. A file is removed again if writing it fails.
pub fn generate_dataset(
    cases: &[Case],
    design: &[DesignPoint],
    outdir: &Path,
    opts: &DatasetOptions,
) -> Result<Vec<ManifestRow>> {
    let mut ids = BTreeSet::new();
    if let Some(p) = design.iter().find(|p| !ids.insert(p.id.as_str())) {
        return Err(Error::param("domain", format!("design point id {} is not unique", p.id)));
    }
    let mut ids = BTreeSet::new();
    if let Some(c) = cases.iter().find(|c| !ids.insert(c.id.as_str())) {
        return Err(Error::param("cases", format!("case id {} is not unique", c.id)));
    }
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let jobs: Vec<(usize, usize)> = (0..cases.len())
        .flat_map(|c| (0..design.len()).map(move |p| (c, p)))
        .collect();
    for case in cases {
        let dir = outdir.join(&case.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let pool = thread_pool(opts.max_parallel)?;
    let rows: Vec<Result<ManifestRow>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, p)| {
                let case = &cases[c];
                let point = &design[p];
                let mut base = *case.model.baseline_seq();
                if let Some(tr) = opts.tr_override {
                    base.tr = tr;
                }
                let seq = point.sequence(&base)?;
                let mut img = synthesize(&case.model, &seq, opts.texture_scale)?;
                if opts.composite_skull {
                    img = composite_with_skull(&img, case.model.baseline(), case.model.brain_mask())?;
                }
                let path = outdir.join(&case.id).join(format!("{}.nii.gz", point.id));
                if let Err(e) = save_volume(&img, &path) {
                    let _ = fs::remove_file(&path);
                    return Err(e);
                }
                Ok(ManifestRow {
                    case_id: case.id.clone(),
                    te_ms: point.te,
                    ti_ms: point.ti,
                    tr_ms: seq.tr,
                    path,
                    gt_lesion_path: case.gt_lesion_path.clone(),
                })
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    write_manifest(&rows, &outdir.join("manifest.csv"))?;
    info!("wrote {} images to {}", rows.len(), outdir.display());
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    #[test]
    fn grid_axis_values() {
        let pts = design_grid(&DomainSpec::default()).unwrap();
        assert_eq!(pts.len(), 49);
        let tes: Vec<f64> = pts.iter().step_by(7).map(|p| p.te).collect();
        assert_eq!(tes, vec![84.0, 95.0, 106.0, 117.0, 128.0, 139.0, 150.0]);
        assert_eq!((pts[0].te, pts[0].ti), (84.0, 2200.0));
        assert_eq!((pts[48].te, pts[48].ti), (150.0, 2900.0));
        assert_eq!(pts[0].id, "te084_ti2200");
    }

    #[test]
    fn two_by_two_is_corners() {
        let spec = DomainSpec { n_te: 2, n_ti: 2, ..DomainSpec::default() };
        let pts: Vec<(f64, f64)> = design_grid(&spec).unwrap().iter().map(|p| (p.te, p.ti)).collect();
        assert_eq!(pts, vec![(84.0, 2200.0), (84.0, 2900.0), (150.0, 2200.0), (150.0, 2900.0)]);
    }

    #[test]
    fn ccd_layout() {
        let spec = DomainSpec::default();
        let pts = design_ccd(&spec).unwrap();
        assert_eq!(pts.len(), 9);
        assert_eq!((pts[4].te, pts[4].ti), (117.0, 2550.0));
        assert!(pts.iter().all(|p| (84.0..=150.0).contains(&p.te) && (2200.0..=2900.0).contains(&p.ti)));
    }

    #[test]
    fn fractional_ids() {
        assert_eq!(DesignPoint::new(117.5, 2550.0).id, "te117p5_ti2550");
        assert_eq!(DesignPoint::new(95.0, 2316.6).id, "te095_ti2316p6");
        assert_eq!(DesignPoint::new(84.0, 2200.0 + 350.0 / 3.0).id, "te084_ti2316p667");
    }

    #[test]
    fn invalid_domains() {
        let bad = DomainSpec { te_min_ms: 150.0, te_max_ms: 84.0, ..DomainSpec::default() };
        assert!(design_grid(&bad).is_err());
        let bad = DomainSpec { n_ti: 1, ..DomainSpec::default() };
        assert!(design_grid(&bad).unwrap_err().to_string().contains("domain.n_ti"));
    }

    #[test]
    fn compositing_selects_per_voxel() {
        let g = Grid::new([4, 2, 1], [1.0; 3]).unwrap();
        let sim = Volume::new(g.clone(), (0..8).map(f64::from).collect()).unwrap();
        let base = Volume::new(g.clone(), (0..8).map(|v| 100.0 + f64::from(v)).collect()).unwrap();
        let ones = Mask::new(g.clone(), vec![1; 8]).unwrap();
        assert_eq!(composite_with_skull(&sim, &base, &ones).unwrap(), sim);
        assert_eq!(composite_with_skull(&sim, &base, &Mask::zeros(g.clone())).unwrap(), base);
        let mixed = Mask::new(g, vec![1, 0, 0, 1, 1, 1, 0, 0]).unwrap();
        let out = composite_with_skull(&sim, &base, &mixed).unwrap();
        for i in 0..8 {
            let expect = if mixed.data()[i] != 0 { sim.data()[i] } else { base.data()[i] };
            assert_eq!(out.data()[i], expect);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ManifestRow {
            case_id: "c1".into(),
            te_ms: 84.0,
            ti_ms: 2316.6666666666665,
            tr_ms: 11000.0,
            path: dir.path().join("c1/x.nii.gz"),
            gt_lesion_path: None,
        }];
        let p = dir.path().join("manifest.csv");
        write_manifest(&rows, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains(",c1/x.nii.gz,"));
        assert_eq!(read_manifest(&p).unwrap(), rows);
    }
}
