//! Synthetic brain phantom with known ground truth.
//!
//! Geometry is a set of concentric ellipsoids sharing the semi-axes `a`.
//! With `r` the normalized ellipsoidal radius of a point:
//!
//! | r            | region |
//! |--------------|--------|
//! | < 0.30       | CSF    |
//! | 0.30 .. 0.85 | WM     |
//! | 0.85 .. 1.00 | GM     |
//! | 1.00 .. 1.12 | skull  |
//!
//! Spherical lesions sit inside WM. Fractions come from 4×4×4 supersampling
//! of every voxel. The T1w image uses fixed tissue means
//! (WM 500, GM 350, CSF 120, lesion 400 by default).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{compute_texture, mixture_signal, ScanModel, TissueParamSet};
use crate::pv::PVMaps;
use crate::signal::{flair_signal, SequenceParams, TissueParams};
use crate::volume::{Grid, Mask, TissueLabel, Volume};

const CSF_OUTER: f64 = 0.30;
const WM_OUTER: f64 = 0.85;
const GM_OUTER: f64 = 1.0;
const SKULL_OUTER: f64 = 1.12;
const SUBSAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSphere {
    /// Centre in voxel coordinates.
    pub center: [f64; 3],
    /// Radius in voxels.
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomTissues {
    pub wm: TissueParams,
    pub gm: TissueParams,
    pub csf: TissueParams,
    pub lesion: TissueParams,
}

impl Default for PhantomTissues {
    fn default() -> Self {
        let p = TissueParamSet::default_init();
        PhantomTissues {
            wm: *p.get(TissueLabel::Wm),
            gm: *p.get(TissueLabel::Gm),
            csf: *p.get(TissueLabel::Csf),
            lesion: *p.get(TissueLabel::Lesion),
        }
    }
}

impl PhantomTissues {
    pub fn as_array(&self) -> [TissueParams; 4] {
        [self.wm, self.gm, self.csf, self.lesion]
    }
}

/// T1w intensity of each pure tissue; must keep WM > lesion, WM > GM > CSF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct T1wMeans {
    pub wm: f64,
    pub gm: f64,
    pub csf: f64,
    pub lesion: f64,
}

impl Default for T1wMeans {
    fn default() -> Self {
        T1wMeans {
            wm: 500.0,
            gm: 350.0,
            csf: 120.0,
            lesion: 400.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Outer GM semi-axes in voxels; scaled from (28, 30, 26) at 64³ if unset.
    pub semi_axes: Option<[f64; 3]>,
    pub kappa: f64,
    /// Ratio of the WM signal to the noise standard deviation; `inf` for a
    /// noise-free image.
    pub snr: f64,
    pub seed: u64,
    pub n_lesions: usize,
    /// Radius range (voxels) for randomly placed lesions.
    pub lesion_radius: [f64; 2],
    /// Explicit lesions; when non-empty, no lesions are drawn at random.
    pub lesions: Vec<LesionSphere>,
    pub sequence: SequenceParams,
    pub tissues: PhantomTissues,
    pub t1w_means: T1wMeans,
    /// Skull FLAIR intensity in model units (scaled by kappa).
    pub skull_signal: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [64, 64, 64],
            spacing_mm: [1.0; 3],
            semi_axes: None,
            kappa: 137.5,
            snr: 50.0,
            seed: 0,
            n_lesions: 10,
            lesion_radius: [2.0, 4.0],
            lesions: Vec::new(),
            sequence: SequenceParams::new(140.0, 2800.0, 11000.0, None).expect("valid baseline"),
            tissues: PhantomTissues::default(),
            t1w_means: T1wMeans::default(),
            skull_signal: 0.08,
        }
    }
}

impl PhantomConfig {
    pub fn semi_axes(&self) -> [f64; 3] {
        self.semi_axes.unwrap_or([
            28.0 * self.dims[0] as f64 / 64.0,
            30.0 * self.dims[1] as f64 / 64.0,
            26.0 * self.dims[2] as f64 / 64.0,
        ])
    }

    fn center(&self) -> [f64; 3] {
        self.dims.map(|d| 0.5 * d as f64 - 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        Grid::new(self.dims, self.spacing_mm)?;
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::param("phantom.dims", "each dimension must be >= 8"));
        }
        let a = self.semi_axes();
        if a.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::param("phantom.semi_axes", "must be positive"));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::param("phantom.kappa", "must be > 0"));
        }
        if !(self.snr > 0.0) {
            return Err(Error::param("phantom.snr", "must be > 0 (inf for no noise)"));
        }
        let [lo, hi] = self.lesion_radius;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::param("phantom.lesion_radius", "require 0 < min <= max"));
        }
        if self.lesions.is_empty() && self.n_lesions == 0 {
            return Err(Error::param("phantom.n_lesions", "at least one lesion is required"));
        }
        self.sequence.validate()?;
        for (t, p) in TissueLabel::ALL.iter().zip(self.tissues.as_array()) {
            p.validate().map_err(|e| Error::param(format!("phantom.tissues.{t}"), e.to_string()))?;
        }
        let m = self.t1w_means;
        if !(m.wm > m.gm && m.gm > m.csf && m.wm > m.lesion && m.csf >= 0.0) {
            return Err(Error::param(
                "phantom.t1w_means",
                "require wm > gm > csf >= 0 and wm > lesion",
            ));
        }
        if !(self.skull_signal.is_finite() && self.skull_signal >= 0.0) {
            return Err(Error::param("phantom.skull_signal", "must be >= 0"));
        }
        Ok(())
    }
}

/// Phantom images, masks and the generating model.
#[derive(Debug, Clone)]
pub struct PhantomStudy {
    pub flair: Volume,
    pub t1w: Volume,
    /// Hard WM/GM/CSF labels (lesion voxels carry the WM label).
    pub tissue_mask: Mask,
    pub lesion_mask: Mask,
    pub truth: ScanModel,
    pub lesions: Vec<LesionSphere>,
}

fn ellipsoid_radius(p: [f64; 3], c: [f64; 3], a: [f64; 3]) -> f64 {
    (0..3)
        .map(|k| ((p[k] - c[k]) / a[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Unit vectors spread over the sphere (Fibonacci lattice).
fn sphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            [r * th.cos(), y, r * th.sin()]
        })
        .collect()
}

/// Whether a ball of radius `r` around `c` lies strictly within WM.
fn ball_in_wm(cfg: &PhantomConfig, center: [f64; 3], r: f64) -> bool {
    let (c0, a) = (cfg.center(), cfg.semi_axes());
    std::iter::once([0.0; 3])
        .chain(sphere_directions(96))
        .all(|d| {
            let p = [center[0] + r * d[0], center[1] + r * d[1], center[2] + r * d[2]];
            let q = ellipsoid_radius(p, c0, a);
            q > CSF_OUTER && q < WM_OUTER
        })
}

const LESION_MARGIN: f64 = 2.0;

fn place_lesions(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Vec<LesionSphere>> {
    if !cfg.lesions.is_empty() {
        for (k, l) in cfg.lesions.iter().enumerate() {
            if !(l.radius > 0.0) || !ball_in_wm(cfg, l.center, l.radius) {
                return Err(Error::param(
                    format!("phantom.lesions[{k}]"),
                    "lesion sphere must lie inside the WM region",
                ));
            }
        }
        return Ok(cfg.lesions.clone());
    }
    let (c0, a) = (cfg.center(), cfg.semi_axes());
    let mut out: Vec<LesionSphere> = Vec::new();
    let mut attempts = 0usize;
    while out.len() < cfg.n_lesions {
        attempts += 1;
        if attempts > 200_000 {
            return Err(Error::param(
                "phantom.n_lesions",
                format!("could only place {} of {} lesions inside WM", out.len(), cfg.n_lesions),
            ));
        }
        let [lo, hi] = cfg.lesion_radius;
        let radius = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let center = [0, 1, 2].map(|k| c0[k] + rng.random_range(-1.0..1.0) * a[k] * WM_OUTER);
        if !ball_in_wm(cfg, center, radius + LESION_MARGIN) {
            continue;
        }
        let clear = out.iter().all(|o| {
            let d = (0..3).map(|k| (o.center[k] - center[k]).powi(2)).sum::<f64>().sqrt();
            d > o.radius + radius + LESION_MARGIN
        });
        if clear {
            out.push(LesionSphere { center, radius });
        }
    }
    Ok(out)
}

/// Raw occupancy of (CSF, WM, GM, lesion, skull) per voxel.
fn occupancy(cfg: &PhantomConfig, grid: &Grid, lesions: &[LesionSphere]) -> Vec<[f64; 5]> {
    let (c0, a) = (cfg.center(), cfg.semi_axes());
    let step = 1.0 / SUBSAMPLES as f64;
    let offsets: Vec<f64> = (0..SUBSAMPLES).map(|k| -0.5 + step * (k as f64 + 0.5)).collect();
    let per_voxel = (SUBSAMPLES * SUBSAMPLES * SUBSAMPLES) as f64;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = grid.coords(i).map(|v| v as f64);
            let near: Vec<&LesionSphere> = lesions
                .iter()
                .filter(|l| {
                    let d = ((x - l.center[0]).powi(2) + (y - l.center[1]).powi(2) + (z - l.center[2]).powi(2)).sqrt();
                    d <= l.radius + 0.9
                })
                .collect();
            let mut counts = [0.0; 5];
            for &dz in &offsets {
                for &dy in &offsets {
                    for &dx in &offsets {
                        let p = [x + dx, y + dy, z + dz];
                        let r = ellipsoid_radius(p, c0, a);
                        let in_lesion = near.iter().any(|l| {
                            (0..3).map(|k| (p[k] - l.center[k]).powi(2)).sum::<f64>() < l.radius * l.radius
                        });
                        let slot = if in_lesion {
                            3
                        } else if r < CSF_OUTER {
                            0
                        } else if r < WM_OUTER {
                            1
                        } else if r < GM_OUTER {
                            2
                        } else if r < SKULL_OUTER {
                            4
                        } else {
                            continue;
                        };
                        counts[slot] += 1.0;
                    }
                }
            }
            counts.map(|c| c / per_voxel)
        })
        .collect()
}

/// Builds the phantom. Results depend only on `cfg` (including its seed).
pub fn make_phantom(cfg: &PhantomConfig) -> Result<PhantomStudy> {
    cfg.validate()?;
    let grid = Grid::new(cfg.dims, cfg.spacing_mm)?;
    let n = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lesions = place_lesions(cfg, &mut rng)?;
    let occ = occupancy(cfg, &grid, &lesions);

    let mut frac = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut brain = vec![0u32; n];
    let mut tissue = vec![0u32; n];
    let mut lesion_mask = vec![0u32; n];
    let mut skull = vec![0.0; n];
    for i in 0..n {
        let [csf, wm, gm, les, sk] = occ[i];
        let total = csf + wm + gm + les;
        if total >= 0.5 {
            brain[i] = 1;
            let norm = [wm / total, gm / total, csf / total, les / total];
            for k in 0..4 {
                frac[k][i] = norm[k];
            }
            let (w, g, c) = (norm[0] + norm[3], norm[1], norm[2]);
            tissue[i] = if w >= g && w >= c {
                TissueLabel::Wm.value()
            } else if g >= c {
                TissueLabel::Gm.value()
            } else {
                TissueLabel::Csf.value()
            };
            if norm[3] >= 0.5 {
                lesion_mask[i] = 1;
            }
        } else {
            skull[i] = sk + total;
        }
    }
    let [wm, gm, csf, les] = frac;
    let vol = |d: Vec<f64>| Volume::new(grid.clone(), d);
    let pv = PVMaps::new(
        [vol(wm)?, vol(gm)?, vol(csf)?, vol(les)?],
        Mask::new(grid.clone(), brain)?,
    )?;

    let params = TissueParamSet::from_prior(cfg.tissues.as_array())?;
    let mix = mixture_signal(&pv, &params, &cfg.sequence);
    let s_wm = flair_signal(&cfg.tissues.wm, &cfg.sequence);
    let sigma = if cfg.snr.is_finite() { cfg.kappa * s_wm / cfg.snr } else { 0.0 };
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("positive sigma");
    let inside = pv.brain_mask().data();
    let mut flair = vec![0.0; n];
    for i in 0..n {
        let clean = if inside[i] != 0 {
            cfg.kappa * mix[i]
        } else {
            cfg.kappa * cfg.skull_signal * skull[i]
        };
        let head = inside[i] != 0 || skull[i] > 0.0;
        let e = if head && sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        flair[i] = (clean + e).max(0.0);
    }
    let flair = vol(flair)?;

    let m = cfg.t1w_means;
    let means = [m.wm, m.gm, m.csf, m.lesion];
    let t1w = vol((0..n)
        .map(|i| (0..4).map(|k| pv.fraction(TissueLabel::ALL[k]).data()[i] * means[k]).sum())
        .collect())?;

    let texture = compute_texture(&flair, cfg.kappa, &pv, &params, &cfg.sequence)?;
    let truth = ScanModel::new(cfg.kappa, params, pv, texture, cfg.sequence, flair.clone())?;
    Ok(PhantomStudy {
        flair,
        t1w,
        tissue_mask: Mask::new(grid.clone(), tissue)?,
        lesion_mask: Mask::new(grid, lesion_mask)?,
        truth,
        lesions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{contrast, PriorRanges};

    fn small() -> PhantomConfig {
        PhantomConfig {
            dims: [32, 32, 32],
            n_lesions: 3,
            lesion_radius: [1.5, 2.5],
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let a = make_phantom(&small()).unwrap();
        let b = make_phantom(&small()).unwrap();
        assert_eq!(a.flair, b.flair);
        assert_eq!(a.lesion_mask, b.lesion_mask);
        let c = make_phantom(&PhantomConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.flair, c.flair);
    }

    #[test]
    fn labels_and_fractions_are_consistent() {
        let s = make_phantom(&small()).unwrap();
        assert_eq!(s.lesions.len(), 3);
        for t in [1, 2, 3] {
            assert!(s.tissue_mask.count(t) > 0, "label {t}");
        }
        assert!(s.lesion_mask.count_nonzero() > 0);
        // every lesion voxel carries the WM label
        for (l, t) in s.lesion_mask.data().iter().zip(s.tissue_mask.data()) {
            if *l != 0 {
                assert_eq!(*t, TissueLabel::Wm.value());
            }
        }
        assert!(s.flair.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn lesion_outside_wm_is_rejected() {
        let cfg = PhantomConfig {
            lesions: vec![LesionSphere { center: [15.5, 15.5, 15.5], radius: 2.0 }],
            ..small()
        };
        let err = make_phantom(&cfg).unwrap_err();
        assert!(err.to_string().contains("phantom.lesions[0]"), "{err}");
    }

    #[test]
    fn lesion_contrast_is_positive_at_baseline() {
        let cfg = PhantomConfig::default();
        let s_wm = flair_signal(&cfg.tissues.wm, &cfg.sequence);
        let s_les = flair_signal(&cfg.tissues.lesion, &cfg.sequence);
        assert!(contrast(s_les, s_wm).unwrap() > 0.0);
        let b = PriorRanges::default().lesion;
        let mid = TissueParams {
            rho: 0.5 * (b.rho.0 + b.rho.1),
            t1: 0.5 * (b.t1_ms.0 + b.t1_ms.1),
            t2: 0.5 * (b.t2_ms.0 + b.t2_ms.1),
        };
        assert!(contrast(flair_signal(&mid, &cfg.sequence), s_wm).unwrap() > 0.0);
    }

    #[test]
    fn noise_free_texture_vanishes() {
        let s = make_phantom(&PhantomConfig { snr: f64::INFINITY, ..small() }).unwrap();
        assert!(s.truth.texture().data().iter().all(|v| v.abs() < 1e-12));
    }
}
