//! Scan-model estimation: pure-tissue means, contrast-matched tissue
//! parameters, the intensity scale κ and the residual texture map.

use std::collections::BTreeMap;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::optim::{nelder_mead, SimplexOptions};
use crate::pv::{estimate_pv, PVMaps, PvOptions, PvReport};
use crate::signal::{flair_signal, SequenceParams, TissueParams};
use crate::volume::{Mask, TissueLabel, Volume};

/// Minimum number of qualifying voxels for a pure-tissue mean.
pub const MIN_PURE_VOXELS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Prior,
    Fitted,
}

/// Apparent parameters for all four tissues.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueParamSet {
    params: [TissueParams; 4],
    provenance: [Provenance; 4],
    /// Contrast residual of the fit that produced the values.
    residual: f64,
}

impl TissueParamSet {
    pub fn new(params: [TissueParams; 4], provenance: [Provenance; 4], residual: f64) -> Result<Self> {
        for (p, t) in params.iter().zip(TissueLabel::ALL) {
            p.validate()
                .map_err(|e| Error::param(format!("{t}"), e.to_string()))?;
        }
        if !(residual.is_finite() && residual >= 0.0) {
            return Err(Error::param("residual", format!("must be finite and >= 0, got {residual}")));
        }
        Ok(TissueParamSet {
            params,
            provenance,
            residual,
        })
    }

    /// All tissues marked as prior values with zero residual.
    pub fn from_prior(params: [TissueParams; 4]) -> Result<Self> {
        Self::new(params, [Provenance::Prior; 4], 0.0)
    }

    /// WM 1007/69, GM 1776/102, CSF 4376/760, lesion 1400/200 (T1/T2, ms).
    pub fn default_init() -> Self {
        Self::from_prior([
            TissueParams { rho: 1.0, t1: 1007.0, t2: 69.0 },
            TissueParams { rho: 1.12, t1: 1776.0, t2: 102.0 },
            TissueParams { rho: 1.3, t1: 4376.0, t2: 760.0 },
            TissueParams { rho: 1.1, t1: 1400.0, t2: 200.0 },
        ])
        .expect("valid defaults")
    }

    pub fn get(&self, t: TissueLabel) -> &TissueParams {
        &self.params[t.index()]
    }

    pub fn params(&self) -> &[TissueParams; 4] {
        &self.params
    }

    pub fn provenance(&self, t: TissueLabel) -> Provenance {
        self.provenance[t.index()]
    }

    /// Achieved value of the regularized contrast cost.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Noise-free FLAIR signal of every tissue under `seq`.
    pub fn signals(&self, seq: &SequenceParams) -> [f64; 4] {
        self.params.map(|p| flair_signal(&p, seq))
    }
}

/// Inclusive bounds of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds(pub f64, pub f64);

impl Bounds {
    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.0 && v <= self.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissuePrior {
    pub rho: Bounds,
    pub t1_ms: Bounds,
    pub t2_ms: Bounds,
}

/// Literature ranges used as box constraints and for randomized parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorRanges {
    pub wm: TissuePrior,
    pub gm: TissuePrior,
    pub csf: TissuePrior,
    pub lesion: TissuePrior,
}

impl Default for PriorRanges {
    fn default() -> Self {
        PriorRanges {
            wm: TissuePrior {
                rho: Bounds(1.0, 1.0),
                t1_ms: Bounds(750.0, 1350.0),
                t2_ms: Bounds(55.0, 110.0),
            },
            gm: TissuePrior {
                rho: Bounds(0.8, 1.5),
                t1_ms: Bounds(1200.0, 2000.0),
                t2_ms: Bounds(80.0, 130.0),
            },
            csf: TissuePrior {
                rho: Bounds(0.8, 2.0),
                t1_ms: Bounds(3000.0, 5000.0),
                t2_ms: Bounds(300.0, 2500.0),
            },
            lesion: TissuePrior {
                rho: Bounds(0.8, 1.5),
                t1_ms: Bounds(1000.0, 2000.0),
                t2_ms: Bounds(100.0, 300.0),
            },
        }
    }
}

impl PriorRanges {
    pub fn get(&self, t: TissueLabel) -> &TissuePrior {
        match t {
            TissueLabel::Wm => &self.wm,
            TissueLabel::Gm => &self.gm,
            TissueLabel::Csf => &self.csf,
            TissueLabel::Lesion => &self.lesion,
        }
    }

    /// Relaxation bounds need `0 < min < max`; spin-density bounds need
    /// `0 <= min <= max`. The WM spin density is fixed at 1 regardless.
    pub fn validate(&self) -> Result<()> {
        for t in TissueLabel::ALL {
            let p = self.get(t);
            for (name, b) in [("t1_ms", p.t1_ms), ("t2_ms", p.t2_ms)] {
                if !(b.0.is_finite() && b.1.is_finite() && b.0 > 0.0 && b.0 < b.1) {
                    return Err(Error::param(
                        format!("priors.{t}.{name}"),
                        format!("require 0 < min < max, got [{}, {}]", b.0, b.1),
                    ));
                }
            }
            if !(p.rho.0.is_finite() && p.rho.1.is_finite() && p.rho.0 >= 0.0 && p.rho.0 <= p.rho.1) {
                return Err(Error::param(
                    format!("priors.{t}.rho"),
                    format!("require 0 <= min <= max, got [{}, {}]", p.rho.0, p.rho.1),
                ));
            }
        }
        Ok(())
    }

    pub fn contains(&self, t: TissueLabel, p: &TissueParams) -> bool {
        let b = self.get(t);
        let rho_ok = t == TissueLabel::Wm || b.rho.contains(p.rho);
        rho_ok && b.t1_ms.contains(p.t1) && b.t2_ms.contains(p.t2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueStats {
    pub mean: f64,
    pub std: f64,
    pub n_voxels: usize,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(Error::param(
            "pure_threshold",
            format!("must lie in (0.5, 1], got {threshold}"),
        ));
    }
    Ok(())
}

/// Mean and standard deviation of `v` over voxels with `PV_t >= threshold`.
pub fn tissue_stats(v: &Volume, pv: &PVMaps, t: TissueLabel, threshold: f64) -> Result<TissueStats> {
    check_threshold(threshold)?;
    v.grid().ensure_matches(pv.brain_mask().grid(), "image vs partial-volume maps")?;
    let frac = pv.fraction(t).data();
    let inside = pv.brain_mask().data();
    let values: Vec<f64> = v
        .data()
        .iter()
        .enumerate()
        .filter(|&(i, _)| inside[i] != 0 && frac[i] >= threshold)
        .map(|(_, &x)| x)
        .collect();
    let n = values.len();
    if n < MIN_PURE_VOXELS {
        return Err(Error::TooFewPureVoxels {
            tissue: t,
            found: n,
            required: MIN_PURE_VOXELS,
        });
    }
    // shifted by the first sample so that constant data gives an exact mean
    let shift = values[0];
    let mean = shift + values.iter().map(|x| x - shift).sum::<f64>() / n as f64;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    Ok(TissueStats {
        mean,
        std: var.sqrt(),
        n_voxels: n,
    })
}

/// Statistics for every tissue; fails if any tissue lacks pure voxels.
pub fn pure_tissue_means(v: &Volume, pv: &PVMaps, threshold: f64) -> Result<BTreeMap<TissueLabel, TissueStats>> {
    TissueLabel::ALL
        .iter()
        .map(|&t| tissue_stats(v, pv, t, threshold).map(|s| (t, s)))
        .collect()
}

/// Michelson-type contrast `(s1 - s2) / (s1 + s2)`.
pub fn contrast(s1: f64, s2: f64) -> Result<f64> {
    if !(s1 + s2 > 0.0) {
        return Err(Error::param(
            "contrast",
            format!("signal sum must be positive, got {s1} + {s2}"),
        ));
    }
    Ok((s1 - s2) / (s1 + s2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Contrast-matched fit of the tissue parameters.
    #[default]
    Fit,
    /// Uniform draw from the prior ranges with a fixed seed.
    Randomize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Weight of the normalized deviation-from-init penalty.
    pub lambda: f64,
    /// Number of simplex starts (the first one is the init itself).
    pub restarts: usize,
    pub seed: u64,
    pub mode: FitMode,
    /// Contrast residual above which the fit is reported as failed.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lambda: 1e-3,
            restarts: 5,
            seed: 0,
            mode: FitMode::Fit,
            tolerance: 1e-4,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::param("fit.lambda", "must be finite and >= 0"));
        }
        if self.restarts == 0 {
            return Err(Error::param("fit.restarts", "must be at least 1"));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::param("fit.tolerance", "must be > 0"));
        }
        Ok(())
    }
}

/// Outcome of [`fit_tissue_params`].
#[derive(Debug, Clone)]
pub struct TissueFit {
    pub params: TissueParamSet,
    /// Euclidean norm of simulated minus measured contrasts.
    pub contrast_residual: f64,
    pub max_contrast_error: f64,
    /// Regularized cost at the returned parameters.
    pub cost: f64,
    /// Contrast terms left out for lack of a measured mean.
    pub dropped: Vec<TissueLabel>,
    pub within_tolerance: bool,
    /// Best cost per simplex iteration of the winning start.
    pub history: Vec<f64>,
}

/// Free-parameter layout: WM T1/T2, then rho/T1/T2 of GM, CSF and lesion.
const N_PARAMS: usize = 11;
const OTHERS: [TissueLabel; 3] = [TissueLabel::Gm, TissueLabel::Csf, TissueLabel::Lesion];

fn pack(p: &[TissueParams; 4]) -> [f64; N_PARAMS] {
    let w = p[0];
    let g = p[1];
    let c = p[2];
    let l = p[3];
    [w.t1, w.t2, g.rho, g.t1, g.t2, c.rho, c.t1, c.t2, l.rho, l.t1, l.t2]
}

fn unpack(x: &[f64]) -> [TissueParams; 4] {
    let tp = |rho, t1, t2| TissueParams { rho, t1, t2 };
    [
        tp(1.0, x[0], x[1]),
        tp(x[2], x[3], x[4]),
        tp(x[5], x[6], x[7]),
        tp(x[8], x[9], x[10]),
    ]
}

fn prior_box(priors: &PriorRanges) -> ([f64; N_PARAMS], [f64; N_PARAMS]) {
    let b: Vec<Bounds> = {
        let w = priors.wm;
        let mut v = vec![w.t1_ms, w.t2_ms];
        for t in OTHERS {
            let p = priors.get(t);
            v.extend([p.rho, p.t1_ms, p.t2_ms]);
        }
        v
    };
    let mut lo = [0.0; N_PARAMS];
    let mut hi = [0.0; N_PARAMS];
    for k in 0..N_PARAMS {
        lo[k] = b[k].0;
        hi[k] = b[k].1;
    }
    (lo, hi)
}

/// Simulated-minus-measured contrast for each active term.
fn contrast_errors(x: &[f64], seq: &SequenceParams, targets: &[(usize, f64)], out: &mut Vec<f64>) -> bool {
    out.clear();
    let p = unpack(x);
    if p.iter().any(|t| t.t2 > t.t1 || t.t2 <= 0.0) {
        return false;
    }
    let s_wm = flair_signal(&p[0], seq);
    for &(idx, measured) in targets {
        let s = flair_signal(&p[idx], seq);
        if !(s + s_wm > 0.0) {
            return false;
        }
        out.push((s - s_wm) / (s + s_wm) - measured);
    }
    true
}

/// Fits tissue parameters so that simulated tissue-to-WM contrasts match the
/// measured ones.
///
/// `means` must contain WM and GM. CSF and lesion terms are dropped when
/// their means are absent; those tissues then keep their init values.
/// The cost is the sum of squared contrast errors plus `lambda` times the
/// squared deviation from `init`, each parameter normalized by its prior
/// width. The best of several jittered simplex runs is then refined by
/// minimum-norm Gauss-Newton steps on the contrast errors alone.
pub fn fit_tissue_params(
    means: &BTreeMap<TissueLabel, f64>,
    seq: &SequenceParams,
    priors: &PriorRanges,
    init: &TissueParamSet,
    opts: &FitOptions,
) -> Result<TissueFit> {
    opts.validate()?;
    priors.validate()?;
    seq.validate()?;
    let wm_mean = *means.get(&TissueLabel::Wm).ok_or(Error::MissingTissue(TissueLabel::Wm))?;
    if !means.contains_key(&TissueLabel::Gm) {
        return Err(Error::MissingTissue(TissueLabel::Gm));
    }

    let mut targets = Vec::new();
    let mut dropped = Vec::new();
    for t in OTHERS {
        match means.get(&t) {
            Some(&m) => targets.push((t.index(), contrast(m, wm_mean)?)),
            None => dropped.push(t),
        }
    }

    let (mut lo, mut hi) = prior_box(priors);
    let mut x0 = pack(init.params());
    for k in 0..N_PARAMS {
        if !(lo[k]..=hi[k]).contains(&x0[k]) {
            warn!("initial parameter {k} = {} lies outside its prior range; clamped", x0[k]);
            x0[k] = x0[k].clamp(lo[k], hi[k]);
        }
    }
    for t in &dropped {
        warn!("no {t} mean available; {t} parameters stay at their initial values");
        let base = 2 + 3 * (t.index() - 1);
        for k in base..base + 3 {
            lo[k] = x0[k];
            hi[k] = x0[k];
        }
    }
    let width: Vec<f64> = (0..N_PARAMS).map(|k| hi[k] - lo[k]).collect();

    let lambda = opts.lambda;
    let cost = |x: &[f64]| -> f64 {
        let mut e = Vec::with_capacity(3);
        if !contrast_errors(x, seq, &targets, &mut e) {
            return f64::INFINITY;
        }
        let data: f64 = e.iter().map(|v| v * v).sum();
        let prior: f64 = (0..N_PARAMS)
            .filter(|&k| width[k] > 0.0)
            .map(|k| ((x[k] - x0[k]) / width[k]).powi(2))
            .sum();
        data + lambda * prior
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let simplex = SimplexOptions::default();
    let mut best: Option<(Vec<f64>, f64, Vec<f64>)> = None;
    for start in 0..opts.restarts {
        let mut s = x0;
        if start > 0 {
            for k in 0..N_PARAMS {
                if width[k] > 0.0 {
                    s[k] = (s[k] + rng.random_range(-0.2..0.2) * width[k]).clamp(lo[k], hi[k]);
                }
            }
        }
        let r = nelder_mead(&s, &lo, &hi, cost, simplex);
        if best.as_ref().is_none_or(|b| r.cost < b.1) {
            best = Some((r.params, r.cost, r.history));
        }
    }
    let (mut x, _, history) = best.expect("at least one start");

    polish(&mut x, seq, &targets, &lo, &hi);

    let mut e = Vec::new();
    if !contrast_errors(&x, seq, &targets, &mut e) {
        return Err(Error::FitFailed("optimizer ended at an invalid parameter set".into()));
    }
    let contrast_residual = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    let max_contrast_error = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let final_cost = cost(&x);
    let within_tolerance = contrast_residual <= opts.tolerance;
    if !within_tolerance {
        warn!(
            "tissue fit contrast residual {contrast_residual:.3e} exceeds tolerance {:.1e}",
            opts.tolerance
        );
    }

    let mut provenance = [Provenance::Fitted; 4];
    for t in &dropped {
        provenance[t.index()] = Provenance::Prior;
    }
    let params = TissueParamSet::new(unpack(&x), provenance, contrast_residual)
        .map_err(|e| Error::FitFailed(e.to_string()))?;
    Ok(TissueFit {
        params,
        contrast_residual,
        max_contrast_error,
        cost: final_cost,
        dropped,
        within_tolerance,
        history,
    })
}

/// Minimum-norm Gauss-Newton on the contrast errors, in box-normalized
/// coordinates, with coordinates at a bound frozen once a step hits them.
fn polish(x: &mut [f64], seq: &SequenceParams, targets: &[(usize, f64)], lo: &[f64], hi: &[f64]) {
    if targets.is_empty() {
        return;
    }
    let width: Vec<f64> = (0..N_PARAMS).map(|k| hi[k] - lo[k]).collect();
    let to_x = |u: &[f64]| -> Vec<f64> { (0..N_PARAMS).map(|k| lo[k] + u[k] * width[k]).collect() };
    let mut u: Vec<f64> = (0..N_PARAMS)
        .map(|k| if width[k] > 0.0 { (x[k] - lo[k]) / width[k] } else { 0.0 })
        .collect();
    let norm = |u: &[f64]| -> Option<(f64, Vec<f64>)> {
        let mut e = Vec::new();
        contrast_errors(&to_x(u), seq, targets, &mut e).then(|| (e.iter().map(|v| v * v).sum::<f64>().sqrt(), e))
    };
    let Some((mut r, mut e)) = norm(&u) else { return };
    let m = targets.len();
    let h = 1e-7;

    for _ in 0..100 {
        if r < 1e-14 {
            break;
        }
        let mut active: Vec<usize> = (0..N_PARAMS).filter(|&k| width[k] > 0.0).collect();
        let mut improved = false;
        for _ in 0..N_PARAMS {
            if active.is_empty() {
                break;
            }
            let mut jac = DMatrix::zeros(m, active.len());
            for (c, &k) in active.iter().enumerate() {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[k] = (u[k] + h).min(1.0);
                dn[k] = (u[k] - h).max(0.0);
                let (Some((_, eu)), Some((_, ed))) = (norm(&up), norm(&dn)) else { return };
                for i in 0..m {
                    jac[(i, c)] = (eu[i] - ed[i]) / (up[k] - dn[k]);
                }
            }
            let rhs = -DVector::from_vec(e.clone());
            let Ok(step) = jac.svd(true, true).solve(&rhs, 1e-12) else { return };
            // freeze coordinates the full step would push out of the box
            let blocked: Vec<usize> = active
                .iter()
                .enumerate()
                .filter(|&(c, &k)| {
                    let t = u[k] + step[c];
                    (t < 0.0 && u[k] <= 1e-12) || (t > 1.0 && u[k] >= 1.0 - 1e-12)
                })
                .map(|(_, &k)| k)
                .collect();
            if !blocked.is_empty() {
                active.retain(|k| !blocked.contains(k));
                continue;
            }
            let mut alpha = 1.0;
            for _ in 0..40 {
                let mut trial = u.clone();
                for (c, &k) in active.iter().enumerate() {
                    trial[k] = (u[k] + alpha * step[c]).clamp(0.0, 1.0);
                }
                if let Some((rt, et)) = norm(&trial) {
                    if rt < r {
                        u = trial;
                        r = rt;
                        e = et;
                        improved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            break;
        }
        if !improved {
            break;
        }
    }
    let xs = to_x(&u);
    for k in 0..N_PARAMS {
        if width[k] > 0.0 {
            x[k] = xs[k];
        }
    }
}

/// Uniform draw of every tissue parameter from `priors`; WM spin density
/// stays 1. Draws violating `T2 <= T1` are repeated.
pub fn sample_tissue_params(priors: &PriorRanges, seed: u64) -> Result<TissueParamSet> {
    priors.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |b: Bounds| if b.0 < b.1 { rng.random_range(b.0..=b.1) } else { b.0 };
    let mut out = [TissueParams { rho: 1.0, t1: 1.0, t2: 1.0 }; 4];
    for t in TissueLabel::ALL {
        let p = priors.get(t);
        let mut tries = 0;
        let sampled = loop {
            let rho = if t == TissueLabel::Wm { 1.0 } else { draw(p.rho) };
            let cand = TissueParams { rho, t1: draw(p.t1_ms), t2: draw(p.t2_ms) };
            if cand.t2 <= cand.t1 {
                break cand;
            }
            tries += 1;
            if tries > 1000 {
                return Err(Error::param(
                    format!("priors.{t}"),
                    "ranges admit no parameters with T2 <= T1",
                ));
            }
        };
        out[t.index()] = sampled;
    }
    TissueParamSet::from_prior(out)
}

/// `kappa = mean_wm / S_WM`.
pub fn estimate_kappa(mean_wm: f64, params: &TissueParamSet, seq: &SequenceParams) -> Result<f64> {
    let s = flair_signal(params.get(TissueLabel::Wm), seq);
    if !(s > 0.0) {
        return Err(Error::Estimation(format!(
            "simulated WM signal is {s}; kappa is undefined"
        )));
    }
    let k = mean_wm / s;
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Estimation(format!("kappa {k} is not positive")));
    }
    Ok(k)
}

/// Noise-free partial-volume mixture `sum_t PV_t * S_t` per voxel.
pub fn mixture_signal(pv: &PVMaps, params: &TissueParamSet, seq: &SequenceParams) -> Vec<f64> {
    let s = params.signals(seq);
    let fr: Vec<&[f64]> = TissueLabel::ALL.iter().map(|&t| pv.fraction(t).data()).collect();
    (0..pv.brain_mask().grid().len())
        .map(|i| (0..4).map(|k| fr[k][i] * s[k]).sum())
        .collect()
}

/// Scale fitted over the pure-WM set: `sum baseline / sum mixture`.
///
/// This makes the texture average exactly zero over that set even when its
/// voxels carry small admixtures of other tissues. It reduces to
/// [`estimate_kappa`] when every selected voxel is pure WM.
pub fn estimate_kappa_region(
    baseline: &Volume,
    pv: &PVMaps,
    params: &TissueParamSet,
    seq: &SequenceParams,
    threshold: f64,
) -> Result<f64> {
    check_threshold(threshold)?;
    let mix = mixture_signal(pv, params, seq);
    let wm = pv.fraction(TissueLabel::Wm).data();
    let inside = pv.brain_mask().data();
    let (mut num, mut den, mut n) = (0.0, 0.0, 0usize);
    for i in 0..mix.len() {
        if inside[i] != 0 && wm[i] >= threshold {
            num += baseline.data()[i];
            den += mix[i];
            n += 1;
        }
    }
    if n < MIN_PURE_VOXELS {
        return Err(Error::TooFewPureVoxels {
            tissue: TissueLabel::Wm,
            found: n,
            required: MIN_PURE_VOXELS,
        });
    }
    if !(den > 0.0) {
        return Err(Error::Estimation("simulated WM signal is zero; kappa is undefined".into()));
    }
    let k = num / den;
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Estimation(format!("kappa {k} is not positive")));
    }
    Ok(k)
}

/// `S_Tex = baseline / kappa - sum_t PV_t * S_t` inside the brain, 0 outside.
pub fn compute_texture(
    baseline: &Volume,
    kappa: f64,
    pv: &PVMaps,
    params: &TissueParamSet,
    seq: &SequenceParams,
) -> Result<Volume> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::param("kappa", format!("must be > 0, got {kappa}")));
    }
    baseline.grid().ensure_matches(pv.brain_mask().grid(), "baseline vs partial-volume maps")?;
    let mix = mixture_signal(pv, params, seq);
    let inside = pv.brain_mask().data();
    let data = baseline
        .data()
        .iter()
        .zip(mix)
        .zip(inside)
        .map(|((&b, m), &k)| if k != 0 { b / kappa - m } else { 0.0 })
        .collect();
    Volume::new(baseline.grid().clone(), data)
}

/// Generative model of one baseline FLAIR study.
#[derive(Debug, Clone)]
pub struct ScanModel {
    kappa: f64,
    params: TissueParamSet,
    pv: PVMaps,
    texture: Volume,
    baseline_seq: SequenceParams,
    baseline: Volume,
}

impl ScanModel {
    pub fn new(
        kappa: f64,
        params: TissueParamSet,
        pv: PVMaps,
        texture: Volume,
        baseline_seq: SequenceParams,
        baseline: Volume,
    ) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::param("kappa", format!("must be > 0, got {kappa}")));
        }
        baseline_seq.validate()?;
        let grid = pv.brain_mask().grid();
        grid.ensure_matches(texture.grid(), "texture")?;
        grid.ensure_matches(baseline.grid(), "baseline")?;
        Ok(ScanModel {
            kappa,
            params,
            pv,
            texture,
            baseline_seq,
            baseline,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn params(&self) -> &TissueParamSet {
        &self.params
    }

    pub fn pv(&self) -> &PVMaps {
        &self.pv
    }

    pub fn texture(&self) -> &Volume {
        &self.texture
    }

    pub fn baseline_seq(&self) -> &SequenceParams {
        &self.baseline_seq
    }

    pub fn baseline(&self) -> &Volume {
        &self.baseline
    }

    pub fn brain_mask(&self) -> &Mask {
        self.pv.brain_mask()
    }

    /// Largest relative deviation, inside the brain, between the baseline
    /// and the model evaluated at the baseline timings. Values near zero
    /// are compared against `1e-6` of the brain's peak intensity instead.
    pub fn reconstruction_error(&self) -> f64 {
        let mix = mixture_signal(&self.pv, &self.params, &self.baseline_seq);
        let inside = self.pv.brain_mask().data();
        let b = self.baseline.data();
        let t = self.texture.data();
        let peak = (0..b.len())
            .filter(|&i| inside[i] != 0)
            .map(|i| b[i].abs())
            .fold(0.0, f64::max);
        let floor = (1e-6 * peak).max(f64::MIN_POSITIVE);
        (0..b.len())
            .filter(|&i| inside[i] != 0)
            .map(|i| {
                let recon = (self.kappa * (mix[i] + t[i])).max(0.0);
                (recon - b[i]).abs() / b[i].abs().max(floor)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub pv: PvOptions,
    pub fit: FitOptions,
    /// Minimum fraction for a voxel to count as pure.
    pub pure_threshold: f64,
    pub init: TissueParamSet,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            pv: PvOptions::default(),
            fit: FitOptions::default(),
            pure_threshold: 0.99,
            init: TissueParamSet::default_init(),
        }
    }
}

/// Diagnostics gathered while building a [`ScanModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub mode: FitMode,
    pub pv: PvReport,
    pub means: BTreeMap<TissueLabel, TissueStats>,
    /// Contrast terms dropped for lack of pure voxels.
    pub dropped: Vec<TissueLabel>,
    pub contrast_residual: f64,
    pub max_contrast_error: f64,
    pub cost: f64,
    pub within_tolerance: bool,
    /// `mean_WM / S_WM` from the pure-WM mean alone.
    pub kappa_wm_mean: f64,
    pub kappa: f64,
    pub reconstruction_error: f64,
}

/// Runs partial-volume estimation, pure-tissue means, the tissue fit,
/// kappa and texture extraction. Errors carry the failing stage.
#[allow(clippy::too_many_arguments)]
pub fn build_scan_model(
    flair: &Volume,
    t1w: &Volume,
    tissue_mask: &Mask,
    lesion_mask: &Mask,
    seq: &SequenceParams,
    priors: &PriorRanges,
    config: &BuildConfig,
) -> Result<(ScanModel, BuildReport)> {
    seq.validate()?;
    priors.validate()?;
    config.fit.validate()?;
    check_threshold(config.pure_threshold)?;

    let (pv, pv_report) =
        estimate_pv(t1w, flair, tissue_mask, lesion_mask, &config.pv).map_err(|e| e.at(Stage::PartialVolume))?;

    let mut means = BTreeMap::new();
    for t in TissueLabel::ALL {
        match tissue_stats(flair, &pv, t, config.pure_threshold) {
            Ok(s) => {
                means.insert(t, s);
            }
            Err(e @ Error::TooFewPureVoxels { .. }) if matches!(t, TissueLabel::Csf | TissueLabel::Lesion) => {
                warn!("{e}; its contrast term is dropped");
            }
            Err(e) => return Err(e.at(Stage::PureTissueMeans)),
        }
    }
    info!(
        "pure means: {}",
        means
            .iter()
            .map(|(t, s)| format!("{t}={:.4} (n={})", s.mean, s.n_voxels))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let mean_values: BTreeMap<TissueLabel, f64> = means.iter().map(|(t, s)| (*t, s.mean)).collect();

    let fit = match config.fit.mode {
        FitMode::Fit => fit_tissue_params(&mean_values, seq, priors, &config.init, &config.fit)
            .map_err(|e| e.at(Stage::TissueFit))?,
        FitMode::Randomize => {
            let params = sample_tissue_params(priors, config.fit.seed).map_err(|e| e.at(Stage::TissueFit))?;
            randomized_fit(params, &mean_values, seq)
        }
    };

    let wm_mean = mean_values[&TissueLabel::Wm];
    let kappa_wm_mean = estimate_kappa(wm_mean, &fit.params, seq).map_err(|e| e.at(Stage::Kappa))?;
    let kappa = estimate_kappa_region(flair, &pv, &fit.params, seq, config.pure_threshold)
        .map_err(|e| e.at(Stage::Kappa))?;
    let texture = compute_texture(flair, kappa, &pv, &fit.params, seq).map_err(|e| e.at(Stage::Texture))?;

    let model = ScanModel::new(kappa, fit.params.clone(), pv, texture, *seq, flair.clone())?;
    let reconstruction_error = model.reconstruction_error();
    let report = BuildReport {
        mode: config.fit.mode,
        pv: pv_report,
        means,
        dropped: fit.dropped,
        contrast_residual: fit.contrast_residual,
        max_contrast_error: fit.max_contrast_error,
        cost: fit.cost,
        within_tolerance: fit.within_tolerance,
        kappa_wm_mean,
        kappa,
        reconstruction_error,
    };
    Ok((model, report))
}

/// Wraps sampled parameters in a [`TissueFit`] carrying their contrast errors.
fn randomized_fit(params: TissueParamSet, means: &BTreeMap<TissueLabel, f64>, seq: &SequenceParams) -> TissueFit {
    let wm = means[&TissueLabel::Wm];
    let targets: Vec<(usize, f64)> = OTHERS
        .iter()
        .filter_map(|t| means.get(t).and_then(|&m| contrast(m, wm).ok()).map(|c| (t.index(), c)))
        .collect();
    let dropped = OTHERS.iter().copied().filter(|t| !means.contains_key(t)).collect();
    let mut e = Vec::new();
    contrast_errors(&pack(params.params()), seq, &targets, &mut e);
    let contrast_residual = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    TissueFit {
        max_contrast_error: e.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        cost: contrast_residual * contrast_residual,
        params,
        contrast_residual,
        dropped,
        within_tolerance: true,
        history: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn seq() -> SequenceParams {
        SequenceParams::new(140.0, 2800.0, 11000.0, None).unwrap()
    }

    fn means_from(p: &TissueParamSet, s: &SequenceParams, kappa: f64) -> BTreeMap<TissueLabel, f64> {
        TissueLabel::ALL
            .iter()
            .map(|&t| (t, kappa * flair_signal(p.get(t), s)))
            .collect()
    }

    #[test]
    fn defaults_bracket_reference_values() {
        let pr = PriorRanges::default();
        pr.validate().unwrap();
        let init = TissueParamSet::default_init();
        for t in TissueLabel::ALL {
            assert!(pr.contains(t, init.get(t)), "{t}");
        }
        // measured WM/GM/CSF relaxation times from the baseline study
        for (t, t1, t2) in [
            (TissueLabel::Wm, 999.0, 94.0),
            (TissueLabel::Gm, 1616.0, 111.0),
            (TissueLabel::Csf, 3176.0, 379.0),
        ] {
            let b = pr.get(t);
            assert!(b.t1_ms.contains(t1) && b.t2_ms.contains(t2), "{t}");
        }
    }

    #[test]
    fn contrast_cases() {
        assert_eq!(contrast(3.0, 3.0).unwrap(), 0.0);
        assert_eq!(contrast(3.0, 0.0).unwrap(), 1.0);
        assert!(contrast(0.0, 0.0).is_err());
        assert!(contrast(-1.0, 0.5).is_err());
    }

    #[test]
    fn kappa_cases() {
        let p = TissueParamSet::default_init();
        let s = seq();
        let wm = flair_signal(p.get(TissueLabel::Wm), &s);
        assert_eq!(estimate_kappa(wm, &p, &s).unwrap(), 1.0);
        let k1 = estimate_kappa(123.0, &p, &s).unwrap();
        let k2 = estimate_kappa(246.0, &p, &s).unwrap();
        assert_eq!(k2, 2.0 * k1);
    }

    #[test]
    fn fit_from_own_means_returns_init() {
        let init = TissueParamSet::default_init();
        let s = seq();
        let fit = fit_tissue_params(&means_from(&init, &s, 37.0), &s, &PriorRanges::default(), &init, &FitOptions::default())
            .unwrap();
        for t in TissueLabel::ALL {
            let (a, b) = (fit.params.get(t), init.get(t));
            assert!((a.rho - b.rho).abs() < 1e-6 && (a.t1 - b.t1).abs() < 1e-6 && (a.t2 - b.t2).abs() < 1e-6);
        }
        assert!(fit.contrast_residual < 1e-12);
        assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fit_matches_perturbed_contrasts() {
        let init = TissueParamSet::default_init();
        let s = seq();
        let mut truth = *init.params();
        truth[TissueLabel::Gm.index()].t2 += 15.0;
        truth[TissueLabel::Lesion.index()].t1 += 120.0;
        let truth = TissueParamSet::from_prior(truth).unwrap();
        let priors = PriorRanges::default();
        let fit = fit_tissue_params(&means_from(&truth, &s, 1.0), &s, &priors, &init, &FitOptions::default()).unwrap();
        assert!(fit.contrast_residual <= 1e-4, "{}", fit.contrast_residual);
        assert!(fit.within_tolerance);
        for t in TissueLabel::ALL {
            assert!(priors.contains(t, fit.params.get(t)), "{t}");
        }
    }

    #[test]
    fn missing_csf_keeps_init() {
        let init = TissueParamSet::default_init();
        let s = seq();
        let mut means = means_from(&init, &s, 1.0);
        means.remove(&TissueLabel::Csf);
        *means.get_mut(&TissueLabel::Gm).unwrap() *= 1.05;
        let fit = fit_tissue_params(&means, &s, &PriorRanges::default(), &init, &FitOptions::default()).unwrap();
        assert_eq!(fit.dropped, vec![TissueLabel::Csf]);
        assert_eq!(fit.params.get(TissueLabel::Csf), init.get(TissueLabel::Csf));
        assert_eq!(fit.params.provenance(TissueLabel::Csf), Provenance::Prior);
        assert_eq!(fit.params.provenance(TissueLabel::Gm), Provenance::Fitted);
    }

    #[test]
    fn sampled_params_respect_priors_and_seed() {
        let pr = PriorRanges::default();
        let a = sample_tissue_params(&pr, 9).unwrap();
        let b = sample_tissue_params(&pr, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get(TissueLabel::Wm).rho, 1.0);
        for t in TissueLabel::ALL {
            assert!(pr.contains(t, a.get(t)));
        }
    }

    fn binary_pv(grid: &Grid) -> PVMaps {
        // x bands of WM, GM, CSF, lesion, 3 voxels each
        let label = |i: usize| grid.coords(i)[0] / 3;
        let frac = |k: usize| {
            Volume::new(grid.clone(), (0..grid.len()).map(|i| f64::from(u8::from(label(i) == k))).collect()).unwrap()
        };
        PVMaps::new([frac(0), frac(1), frac(2), frac(3)], Mask::new(grid.clone(), vec![1; grid.len()]).unwrap())
            .unwrap()
    }

    #[test]
    fn pure_means_on_binary_phantom() {
        let g = Grid::new([12, 3, 3], [1.0; 3]).unwrap();
        let pv = binary_pv(&g);
        let p = TissueParamSet::default_init();
        let s = seq();
        let img = Volume::new(g.clone(), mixture_signal(&pv, &p, &s).iter().map(|m| 50.0 * m).collect()).unwrap();
        let means = pure_tissue_means(&img, &pv, 1.0).unwrap();
        for t in TissueLabel::ALL {
            assert_eq!(means[&t].mean, 50.0 * flair_signal(p.get(t), &s));
            assert_eq!(means[&t].std, 0.0);
            assert_eq!(means[&t].n_voxels, 27);
        }
        let flat = Volume::filled(g, 4.5).unwrap();
        for st in pure_tissue_means(&flat, &pv, 0.99).unwrap().values() {
            assert_eq!((st.mean, st.std), (4.5, 0.0));
        }
        assert!(matches!(
            tissue_stats(&img, &pv, TissueLabel::Wm, 0.5),
            Err(Error::InvalidParameter { .. })
        ));
    }

    #[test]
    fn too_few_pure_voxels() {
        let g = Grid::new([12, 1, 1], [1.0; 3]).unwrap();
        let pv = binary_pv(&g);
        let img = Volume::filled(g, 1.0).unwrap();
        let err = tissue_stats(&img, &pv, TissueLabel::Csf, 0.99).unwrap_err();
        assert!(matches!(err, Error::TooFewPureVoxels { found: 3, .. }));
    }

    #[test]
    fn texture_vanishes_for_model_data() {
        let g = Grid::new([12, 3, 3], [1.0; 3]).unwrap();
        let pv = binary_pv(&g);
        let p = TissueParamSet::default_init();
        let s = seq();
        let img = Volume::new(g, mixture_signal(&pv, &p, &s).iter().map(|m| 80.0 * m).collect()).unwrap();
        let k = estimate_kappa_region(&img, &pv, &p, &s, 0.99).unwrap();
        assert!((k - 80.0).abs() < 1e-9);
        let tex = compute_texture(&img, k, &pv, &p, &s).unwrap();
        assert!(tex.data().iter().all(|v| v.abs() < 1e-9));
    }
}
