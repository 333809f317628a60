//! Lesion-aware partial-volume estimation.
//!
//! Each voxel near a tissue interface is modelled as a mixture of exactly
//! two tissues with equal-variance Gaussian noise. The maximum-likelihood
//! mixing fraction is then the clamped linear interpolation between the two
//! pure-tissue means ([`mixel_fraction`]). Voxels farther than `band` voxels
//! (Chebyshev distance) from any other tissue are taken as pure.
//!
//! The pipeline runs twice: once on the T1w image for WM/GM/CSF, once on the
//! FLAIR image restricted to WM and lesions, and the results are fused.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, TissueLabel, Volume};

/// Per-tissue fraction maps plus the brain mask they are defined on.
#[derive(Debug, Clone, PartialEq)]
pub struct PVMaps {
    fractions: [Volume; 4],
    brain_mask: Mask,
}

impl PVMaps {
    /// Checks the range, unit-sum and zero-outside invariants.
    pub fn new(fractions: [Volume; 4], brain_mask: Mask) -> Result<Self> {
        for f in &fractions {
            brain_mask.grid().ensure_matches(f.grid(), "partial-volume map")?;
        }
        let maps = PVMaps {
            fractions,
            brain_mask,
        };
        maps.check_invariants()?;
        Ok(maps)
    }

    pub fn fraction(&self, t: TissueLabel) -> &Volume {
        &self.fractions[t.index()]
    }

    pub fn brain_mask(&self) -> &Mask {
        &self.brain_mask
    }

    /// Sum of fractions at linear index `i`.
    pub fn total(&self, i: usize) -> f64 {
        self.fractions.iter().map(|f| f.data()[i]).sum()
    }

    fn check_invariants(&self) -> Result<()> {
        let inside = self.brain_mask.data();
        for i in 0..inside.len() {
            let mut sum = 0.0;
            for (k, f) in self.fractions.iter().enumerate() {
                let v = f.data()[i];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidVolume(format!(
                        "{} fraction {v} outside [0, 1] at index {i}",
                        TissueLabel::ALL[k]
                    )));
                }
                if inside[i] == 0 && v != 0.0 {
                    return Err(Error::InvalidVolume(format!(
                        "nonzero {} fraction outside the brain at index {i}",
                        TissueLabel::ALL[k]
                    )));
                }
                sum += v;
            }
            if inside[i] != 0 && (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidVolume(format!(
                    "fractions sum to {sum} at brain voxel {i}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvOptions {
    /// Interface band half-width in voxels.
    pub band: usize,
    /// Erosion (voxels) applied to label cores before computing pure means.
    pub erosion: usize,
}

impl Default for PvOptions {
    fn default() -> Self {
        PvOptions { band: 1, erosion: 1 }
    }
}

impl PvOptions {
    pub fn validate(&self) -> Result<()> {
        if self.band == 0 {
            return Err(Error::param("pv.band", "must be at least 1 voxel"));
        }
        Ok(())
    }
}

/// Counters for conditions that were resolved rather than rejected.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PvReport {
    /// Band voxels touching two or more other tissues.
    pub multi_tissue_voxels: usize,
    /// Lesion voxels outside WM that were relabelled as WM.
    pub reassigned_lesion_voxels: usize,
    /// Lesions darker than WM on the FLAIR image.
    pub lesion_contrast_inverted: bool,
    /// Tissues whose eroded core was empty, so all label voxels were used.
    pub uneroded_means: Vec<TissueLabel>,
}

/// Fraction of tissue `a` in a two-tissue mixture with intensity `x`.
pub fn mixel_fraction(x: f64, mu_a: f64, mu_b: f64) -> Result<f64> {
    if mu_a == mu_b {
        return Err(Error::Estimation(format!(
            "tissue means coincide ({mu_a}); interface is not identifiable"
        )));
    }
    Ok(((x - mu_b) / (mu_a - mu_b)).clamp(0.0, 1.0))
}

/// Box (Chebyshev) dilation of a boolean image.
fn dilate(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let [nx, ny, nz] = dims;
    let mut cur = mask.to_vec();
    let strides = [1, nx, nx * ny];
    let extents = [nx, ny, nz];
    for axis in 0..3 {
        let stride = strides[axis];
        let len = extents[axis];
        let mut next = vec![false; cur.len()];
        // iterate over every line parallel to `axis`
        for start in 0..cur.len() {
            let pos = (start / stride) % len;
            if pos != 0 {
                continue;
            }
            // running count of true samples in the window
            let at = |k: usize| start + k * stride;
            let mut count = 0usize;
            for k in 0..radius.min(len - 1) + 1 {
                count += usize::from(cur[at(k)]);
            }
            for k in 0..len {
                next[at(k)] = count > 0;
                let enter = k + radius + 1;
                if enter < len {
                    count += usize::from(cur[at(enter)]);
                }
                if k >= radius {
                    count -= usize::from(cur[at(k - radius)]);
                }
            }
        }
        cur = next;
    }
    cur
}

/// Fractions and means from one two-class-per-voxel estimation pass.
struct PassResult {
    fractions: Vec<Vec<f64>>,
    means: Vec<f64>,
    multi_tissue_voxels: usize,
    uneroded: Vec<TissueLabel>,
}

/// `labels[i]` is an index into `tissues` or `None` for voxels outside the
/// region. `exclude_core` voxels still get fractions but do not contribute
/// to the pure means.
fn mixel_pass(
    image: &[f64],
    dims: [usize; 3],
    labels: &[Option<usize>],
    tissues: &[TissueLabel],
    exclude_core: &[bool],
    opts: &PvOptions,
) -> Result<PassResult> {
    let n = image.len();
    let k = tissues.len();
    let core_radius = opts.band.max(opts.erosion);

    let indicator: Vec<Vec<bool>> = (0..k)
        .map(|t| labels.iter().map(|l| *l == Some(t)).collect())
        .collect();
    let near_band: Vec<Vec<bool>> = indicator.iter().map(|m| dilate(m, dims, opts.band)).collect();
    let near_core: Vec<Vec<bool>> = if core_radius == opts.band {
        near_band.clone()
    } else {
        indicator.iter().map(|m| dilate(m, dims, core_radius)).collect()
    };
    let outside: Vec<bool> = labels.iter().map(|l| l.is_none()).collect();
    let near_outside = dilate(&outside, dims, opts.erosion);

    let mut means = vec![0.0; k];
    let mut uneroded = Vec::new();
    for t in 0..k {
        let (mut sum, mut cnt) = (0.0, 0usize);
        for i in 0..n {
            if labels[i] != Some(t) || exclude_core[i] || near_outside[i] {
                continue;
            }
            if (0..k).any(|s| s != t && near_core[s][i]) {
                continue;
            }
            sum += image[i];
            cnt += 1;
        }
        if cnt == 0 {
            for i in 0..n {
                if labels[i] == Some(t) && !exclude_core[i] {
                    sum += image[i];
                    cnt += 1;
                }
            }
            if cnt == 0 {
                return Err(Error::MissingTissue(tissues[t]));
            }
            warn!("{}: eroded core is empty, using all label voxels for its mean", tissues[t]);
            uneroded.push(tissues[t]);
        }
        means[t] = sum / cnt as f64;
    }

    let mut fractions = vec![vec![0.0; n]; k];
    let mut multi = 0usize;
    let mut neighbours = Vec::with_capacity(k);
    for i in 0..n {
        let Some(t) = labels[i] else { continue };
        neighbours.clear();
        neighbours.extend((0..k).filter(|&s| s != t && near_band[s][i]));
        let partner = match neighbours.len() {
            0 => None,
            1 => Some(neighbours[0]),
            _ => {
                multi += 1;
                // nearest-two-means: pair the voxel's own tissue with the
                // neighbouring tissue whose mean is closest to the intensity
                neighbours
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        (image[i] - means[a])
                            .abs()
                            .total_cmp(&(image[i] - means[b]).abs())
                    })
            }
        };
        match partner {
            None => fractions[t][i] = 1.0,
            Some(s) => {
                let f = mixel_fraction(image[i], means[t], means[s])?;
                fractions[t][i] = f;
                fractions[s][i] = 1.0 - f;
            }
        }
    }
    if multi > 0 {
        warn!("{multi} band voxels touch three or more tissues; resolved by nearest means");
    }

    Ok(PassResult {
        fractions,
        means,
        multi_tissue_voxels: multi,
        uneroded,
    })
}

fn to_volume(like: &Volume, data: Vec<f64>) -> Volume {
    Volume::new(like.grid().clone(), data).expect("fractions are finite")
}

/// WM/GM/CSF fractions from a T1w image and a hard tissue segmentation.
///
/// Voxels labelled [`TissueLabel::Lesion`] in `tissue_mask` are treated as WM
/// but excluded from the pure-WM mean. The returned lesion map is zero.
pub fn estimate_pv_normal(t1w: &Volume, tissue_mask: &Mask, opts: &PvOptions) -> Result<(PVMaps, PvReport)> {
    opts.validate()?;
    t1w.grid().ensure_matches(tissue_mask.grid(), "T1w vs tissue mask")?;
    let tissues = [TissueLabel::Wm, TissueLabel::Gm, TissueLabel::Csf];
    let labels: Vec<Option<usize>> = tissue_mask
        .data()
        .iter()
        .map(|&l| match TissueLabel::from_value(l) {
            Some(TissueLabel::Wm) | Some(TissueLabel::Lesion) => Some(0),
            Some(TissueLabel::Gm) => Some(1),
            Some(TissueLabel::Csf) => Some(2),
            None => None,
        })
        .collect();
    for (k, t) in tissues.iter().enumerate() {
        if !labels.iter().any(|l| *l == Some(k)) {
            return Err(Error::MissingTissue(*t));
        }
    }
    let exclude: Vec<bool> = tissue_mask
        .data()
        .iter()
        .map(|&l| l == TissueLabel::Lesion.value())
        .collect();

    let pass = mixel_pass(t1w.data(), t1w.dims(), &labels, &tissues, &exclude, opts)?;
    let brain = Mask::new(
        tissue_mask.grid().clone(),
        labels.iter().map(|l| u32::from(l.is_some())).collect(),
    )?;
    let mut it = pass.fractions.into_iter();
    let maps = PVMaps::new(
        [
            to_volume(t1w, it.next().unwrap()),
            to_volume(t1w, it.next().unwrap()),
            to_volume(t1w, it.next().unwrap()),
            Volume::zeros(t1w.grid().clone()),
        ],
        brain,
    )?;
    let report = PvReport {
        multi_tissue_voxels: pass.multi_tissue_voxels,
        uneroded_means: pass.uneroded,
        ..PvReport::default()
    };
    Ok((maps, report))
}

/// WM and lesion fractions from a FLAIR image restricted to WM (label 1)
/// and lesion (label 4) voxels. Returns `(PV_WM2, PV_Lesion, report)`.
pub fn estimate_pv_lesion(
    flair: &Volume,
    wm_lesion_mask: &Mask,
    opts: &PvOptions,
) -> Result<(Volume, Volume, PvReport)> {
    opts.validate()?;
    flair.grid().ensure_matches(wm_lesion_mask.grid(), "FLAIR vs WM/lesion mask")?;
    let mut report = PvReport::default();
    let labels: Vec<Option<usize>> = wm_lesion_mask
        .data()
        .iter()
        .map(|&l| match TissueLabel::from_value(l) {
            Some(TissueLabel::Wm) => Some(0),
            Some(TissueLabel::Lesion) => Some(1),
            _ => None,
        })
        .collect();
    let has_lesion = labels.iter().any(|l| *l == Some(1));
    let has_wm = labels.iter().any(|l| *l == Some(0));

    if !has_lesion {
        let wm: Vec<f64> = labels.iter().map(|l| if l.is_some() { 1.0 } else { 0.0 }).collect();
        return Ok((to_volume(flair, wm), Volume::zeros(flair.grid().clone()), report));
    }
    if !has_wm {
        return Err(Error::MissingTissue(TissueLabel::Wm));
    }

    let exclude = vec![false; labels.len()];
    let tissues = [TissueLabel::Wm, TissueLabel::Lesion];
    let pass = mixel_pass(flair.data(), flair.dims(), &labels, &tissues, &exclude, opts)?;
    if pass.means[1] < pass.means[0] {
        warn!(
            "lesion mean {} is below WM mean {} on FLAIR; fractions rely on clamping",
            pass.means[1], pass.means[0]
        );
        report.lesion_contrast_inverted = true;
    }
    report.multi_tissue_voxels = pass.multi_tissue_voxels;
    report.uneroded_means = pass.uneroded;
    let mut it = pass.fractions.into_iter();
    let wm = to_volume(flair, it.next().unwrap());
    let lesion = to_volume(flair, it.next().unwrap());
    Ok((wm, lesion, report))
}

/// Merges normal-tissue maps with lesion fractions.
///
/// GM is zeroed on lesion-mask voxels. Where `lesion_pv > 0` the lesion
/// fraction is taken as given and WM receives the remainder; GM and CSF keep
/// their values unless they would exceed the remainder, in which case they
/// are scaled down. Any deficit left by GM zeroing goes to WM.
pub fn fuse_pv(normal: &PVMaps, lesion_pv: &Volume, lesion_mask: &Mask) -> Result<PVMaps> {
    let grid = normal.brain_mask.grid();
    grid.ensure_matches(lesion_pv.grid(), "lesion fraction map")?;
    grid.ensure_matches(lesion_mask.grid(), "lesion mask")?;
    let n = grid.len();
    let mut wm = normal.fraction(TissueLabel::Wm).data().to_vec();
    let mut gm = normal.fraction(TissueLabel::Gm).data().to_vec();
    let mut csf = normal.fraction(TissueLabel::Csf).data().to_vec();
    let mut les = vec![0.0; n];
    let mut brain = normal.brain_mask.data().to_vec();

    for i in 0..n {
        let in_lesion_mask = lesion_mask.data()[i] != 0;
        let lp = lesion_pv.data()[i].clamp(0.0, 1.0);
        if in_lesion_mask || lp > 0.0 {
            brain[i] = 1;
        }
        if brain[i] == 0 {
            continue;
        }
        if in_lesion_mask {
            gm[i] = 0.0;
        }
        if lp > 0.0 {
            let rest = 1.0 - lp;
            let other = gm[i] + csf[i];
            if other > rest {
                let s = rest / other;
                gm[i] *= s;
                csf[i] *= s;
            }
            les[i] = lp;
            wm[i] = (rest - gm[i] - csf[i]).max(0.0);
        } else {
            let deficit = 1.0 - (wm[i] + gm[i] + csf[i]);
            if deficit > 0.0 {
                wm[i] += deficit;
            }
        }
    }

    let like = normal.fraction(TissueLabel::Wm);
    PVMaps::new(
        [
            to_volume(like, wm),
            to_volume(like, gm),
            to_volume(like, csf),
            to_volume(like, les),
        ],
        Mask::new(grid.clone(), brain)?,
    )
}

/// Full two-stage estimation from a hard tissue segmentation (WM/GM/CSF
/// labels) and a lesion mask (nonzero = lesion).
pub fn estimate_pv(
    t1w: &Volume,
    flair: &Volume,
    tissue_mask: &Mask,
    lesion_mask: &Mask,
    opts: &PvOptions,
) -> Result<(PVMaps, PvReport)> {
    let grid = tissue_mask.grid();
    grid.ensure_matches(t1w.grid(), "T1w")?;
    grid.ensure_matches(flair.grid(), "FLAIR")?;
    grid.ensure_matches(lesion_mask.grid(), "lesion mask")?;

    let wm = TissueLabel::Wm.value();
    let gm = TissueLabel::Gm.value();
    let lesion = TissueLabel::Lesion.value();
    let mut reassigned = 0usize;
    let mut kept_lesion = vec![0u32; grid.len()];
    // stage-1 labels: lesions count as WM but stay out of the pure-WM core
    let stage1: Vec<u32> = tissue_mask
        .data()
        .iter()
        .zip(lesion_mask.data())
        .enumerate()
        .map(|(i, (&t, &l))| {
            if l == 0 {
                return t;
            }
            if t == wm || t == gm || t == lesion {
                kept_lesion[i] = 1;
                lesion
            } else {
                reassigned += 1;
                wm
            }
        })
        .collect();
    if reassigned > 0 {
        warn!("{reassigned} lesion voxels lie outside WM and were relabelled as WM");
    }
    let stage1 = Mask::new(grid.clone(), stage1)?;
    let (normal, mut report) = estimate_pv_normal(t1w, &stage1, opts)?;

    let stage2 = Mask::new(
        grid.clone(),
        stage1
            .data()
            .iter()
            .map(|&l| if l == wm || l == lesion { l } else { 0 })
            .collect(),
    )?;
    let (_, lesion_pv, lesion_report) = estimate_pv_lesion(flair, &stage2, opts)?;
    let kept = Mask::new(grid.clone(), kept_lesion)?;
    let fused = fuse_pv(&normal, &lesion_pv, &kept)?;

    report.reassigned_lesion_voxels = reassigned;
    report.lesion_contrast_inverted = lesion_report.lesion_contrast_inverted;
    report.multi_tissue_voxels += lesion_report.multi_tissue_voxels;
    report.uneroded_means.extend(lesion_report.uneroded_means);
    Ok((fused, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn mixel_fraction_cases() {
        assert_eq!(mixel_fraction(500.0, 500.0, 350.0).unwrap(), 1.0);
        assert_eq!(mixel_fraction(425.0, 500.0, 350.0).unwrap(), 0.5);
        assert_eq!(mixel_fraction(900.0, 500.0, 350.0).unwrap(), 1.0);
        assert_eq!(mixel_fraction(0.0, 500.0, 350.0).unwrap(), 0.0);
        assert!(mixel_fraction(1.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn dilation_is_chebyshev_ball() {
        let dims = [7, 7, 7];
        let g = Grid::new(dims, [1.0; 3]).unwrap();
        let mut m = vec![false; g.len()];
        m[g.index(3, 3, 3)] = true;
        let d = dilate(&m, dims, 2);
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            let cheb = [x, y, z].iter().map(|&c| (c as i64 - 3).abs()).max().unwrap();
            assert_eq!(d[i], cheb <= 2, "{x} {y} {z}");
        }
    }

    /// WM | 10-voxel ramp | GM | CSF along a single line.
    fn ramp_phantom(noise: Option<(f64, u64)>) -> (Volume, Mask, Vec<f64>) {
        let (mu_wm, mu_gm, mu_csf) = (500.0, 350.0, 120.0);
        let dims = [40, 1, 1];
        let g = Grid::new(dims, [1.0; 3]).unwrap();
        let mut truth = vec![0.0; g.len()];
        let mut img = vec![0.0; g.len()];
        let mut lab = vec![0u32; g.len()];
        let mut rng = noise.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
        let normal = noise.map(|(s, _)| Normal::new(0.0, s).unwrap());
        for i in 0..g.len() {
            let [x, _, _] = g.coords(i);
            let (f_wm, label) = if x < 10 {
                (1.0, 1)
            } else if x < 20 {
                let f = 1.0 - ((x - 10) as f64 + 0.5) / 10.0;
                (f, if x < 15 { 1 } else { 2 })
            } else if x < 34 {
                (0.0, 2)
            } else {
                (0.0, 3)
            };
            let mut v = if label == 3 { mu_csf } else { f_wm * mu_wm + (1.0 - f_wm) * mu_gm };
            if let (Some(r), Some(n)) = (rng.as_mut(), normal.as_ref()) {
                v += n.sample(r);
            }
            truth[i] = f_wm;
            img[i] = v;
            lab[i] = label;
        }
        (
            Volume::new(g.clone(), img).unwrap(),
            Mask::new(g, lab).unwrap(),
            truth,
        )
    }

    #[test]
    fn ramp_recovered_exactly() {
        let (img, mask, truth) = ramp_phantom(None);
        let opts = PvOptions { band: 5, erosion: 1 };
        let (maps, _) = estimate_pv_normal(&img, &mask, &opts).unwrap();
        let wm = maps.fraction(TissueLabel::Wm).data();
        for i in 0..truth.len() {
            let [x, _, _] = img.grid().coords(i);
            if x < 30 {
                assert!((wm[i] - truth[i]).abs() < 1e-9, "x={x}: {} vs {}", wm[i], truth[i]);
            }
        }
    }

    #[test]
    fn noisy_ramp_error_bounded() {
        let (img, mask, truth) = ramp_phantom(Some((150.0 / 50.0, 12)));
        let opts = PvOptions { band: 5, erosion: 1 };
        let (maps, _) = estimate_pv_normal(&img, &mask, &opts).unwrap();
        let wm = maps.fraction(TissueLabel::Wm).data();
        let worst = (0..truth.len())
            .filter(|&i| img.grid().coords(i)[0] < 30)
            .map(|i| (wm[i] - truth[i]).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.05, "{worst}");
    }

    #[test]
    fn noisy_ramp_pass_rate_matches_noise_model() {
        // per-voxel fraction noise is 1/50; with 10 ramp voxels the chance
        // that all stay within 0.05 is about 0.88
        let opts = PvOptions { band: 5, erosion: 1 };
        let trials = 400;
        let mut within = 0;
        for seed in 0..trials {
            let (img, mask, truth) = ramp_phantom(Some((150.0 / 50.0, 1000 + seed)));
            let (maps, _) = estimate_pv_normal(&img, &mask, &opts).unwrap();
            let wm = maps.fraction(TissueLabel::Wm).data();
            let worst = (0..30).map(|i| (wm[i] - truth[i]).abs()).fold(0.0, f64::max);
            within += usize::from(worst <= 0.05);
        }
        let rate = within as f64 / trials as f64;
        assert!(rate > 0.8, "{rate}");
    }

    #[test]
    fn piecewise_constant_gives_binary_fractions() {
        let g = Grid::new([12, 4, 4], [1.0; 3]).unwrap();
        let lab: Vec<u32> = (0..g.len()).map(|i| 1 + (g.coords(i)[0] / 4) as u32).collect();
        let means = [0.0, 500.0, 350.0, 120.0];
        let img: Vec<f64> = lab.iter().map(|&l| means[l as usize]).collect();
        let (maps, _) = estimate_pv_normal(
            &Volume::new(g.clone(), img).unwrap(),
            &Mask::new(g, lab).unwrap(),
            &PvOptions::default(),
        )
        .unwrap();
        for t in [TissueLabel::Wm, TissueLabel::Gm, TissueLabel::Csf] {
            assert!(maps.fraction(t).data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn missing_tissue_is_an_error() {
        let g = Grid::new([4, 4, 4], [1.0; 3]).unwrap();
        let lab = vec![1u32; g.len()];
        let img = vec![1.0; g.len()];
        let err = estimate_pv_normal(
            &Volume::new(g.clone(), img).unwrap(),
            &Mask::new(g, lab).unwrap(),
            &PvOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingTissue(TissueLabel::Gm)));
    }

    fn lesion_block(lesion_value: f64) -> (Volume, Mask) {
        let g = Grid::new([11, 11, 11], [1.0; 3]).unwrap();
        let mut lab = vec![1u32; g.len()];
        let mut img = vec![100.0; g.len()];
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            if (4..7).contains(&x) && (4..7).contains(&y) && (4..7).contains(&z) {
                lab[i] = 4;
                img[i] = lesion_value;
            }
        }
        // one mixed voxel face-adjacent to the block
        img[g.index(7, 5, 5)] = 0.6 * 100.0 + 0.4 * lesion_value;
        (Volume::new(g.clone(), img).unwrap(), Mask::new(g, lab).unwrap())
    }

    #[test]
    fn lesion_free_case() {
        let g = Grid::new([5, 5, 5], [1.0; 3]).unwrap();
        let mut lab = vec![1u32; g.len()];
        lab[0] = 0;
        let (wm, les, _) = estimate_pv_lesion(
            &Volume::filled(g.clone(), 3.0).unwrap(),
            &Mask::new(g, lab).unwrap(),
            &PvOptions::default(),
        )
        .unwrap();
        assert!(les.data().iter().all(|&v| v == 0.0));
        assert_eq!(wm.data()[0], 0.0);
        assert!(wm.data()[1..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sharp_lesion_block() {
        let (img, mask) = lesion_block(300.0);
        let (wm, les, report) = estimate_pv_lesion(&img, &mask, &PvOptions::default()).unwrap();
        let g = img.grid();
        for i in 0..g.len() {
            if mask.data()[i] == 4 {
                assert_eq!(les.data()[i], 1.0);
            }
            assert!((wm.data()[i] + les.data()[i] - 1.0).abs() < 1e-12);
        }
        let mixed = les.data()[g.index(7, 5, 5)];
        assert!(mixed > 0.0 && mixed < 1.0);
        assert!((mixed - 0.4).abs() < 1e-12);
        assert!(!report.lesion_contrast_inverted);
    }

    #[test]
    fn inverted_lesion_contrast_still_valid() {
        let (img, mask) = lesion_block(20.0);
        let (wm, les, report) = estimate_pv_lesion(&img, &mask, &PvOptions::default()).unwrap();
        assert!(report.lesion_contrast_inverted);
        assert!(les.data().iter().chain(wm.data()).all(|&v| (0.0..=1.0).contains(&v)));
    }

    fn simple_normal_maps() -> PVMaps {
        let g = Grid::new([4, 1, 1], [1.0; 3]).unwrap();
        let vol = |d: Vec<f64>| Volume::new(g.clone(), d).unwrap();
        PVMaps::new(
            [
                vol(vec![1.0, 0.6, 0.0, 0.0]),
                vol(vec![0.0, 0.4, 1.0, 0.0]),
                vol(vec![0.0, 0.0, 0.0, 0.0]),
                vol(vec![0.0; 4]),
            ],
            Mask::new(g.clone(), vec![1, 1, 1, 0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn fuse_with_no_lesions_is_identity() {
        let normal = simple_normal_maps();
        let g = normal.brain_mask().grid().clone();
        let fused = fuse_pv(&normal, &Volume::zeros(g.clone()), &Mask::zeros(g)).unwrap();
        assert_eq!(fused, normal);
    }

    #[test]
    fn fuse_applies_lesion_fraction() {
        let normal = simple_normal_maps();
        let g = normal.brain_mask().grid().clone();
        let les = Volume::new(g.clone(), vec![0.7, 0.0, 0.0, 0.0]).unwrap();
        let fused = fuse_pv(&normal, &les, &Mask::zeros(g.clone())).unwrap();
        assert!((fused.fraction(TissueLabel::Wm).data()[0] - 0.3).abs() < 1e-15);
        assert_eq!(fused.fraction(TissueLabel::Lesion).data()[0], 0.7);

        // GM zeroed inside the lesion mask, deficit to WM
        let mask = Mask::new(g, vec![0, 1, 0, 0]).unwrap();
        let fused = fuse_pv(&normal, &Volume::zeros(les.grid().clone()), &mask).unwrap();
        assert_eq!(fused.fraction(TissueLabel::Gm).data()[1], 0.0);
        assert_eq!(fused.fraction(TissueLabel::Wm).data()[1], 1.0);
    }

    #[test]
    fn fuse_rescales_gm_when_lesion_fraction_leaves_no_room() {
        let normal = simple_normal_maps();
        let g = normal.brain_mask().grid().clone();
        let les = Volume::new(g.clone(), vec![0.0, 0.8, 0.0, 0.0]).unwrap();
        let fused = fuse_pv(&normal, &les, &Mask::zeros(g)).unwrap();
        let i = 1;
        assert!((fused.total(i) - 1.0).abs() < 1e-12);
        assert_eq!(fused.fraction(TissueLabel::Lesion).data()[i], 0.8);
        assert!((fused.fraction(TissueLabel::Gm).data()[i] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn affine_intensity_transform_leaves_fractions_unchanged() {
        let (img, mask, _) = ramp_phantom(Some((3.0, 5)));
        let opts = PvOptions { band: 5, erosion: 1 };
        let (a, _) = estimate_pv_normal(&img, &mask, &opts).unwrap();
        let scaled = img.map(|v| 2.5 * v + 40.0).unwrap();
        let (b, _) = estimate_pv_normal(&scaled, &mask, &opts).unwrap();
        for t in TissueLabel::ALL {
            for (x, y) in a.fraction(t).data().iter().zip(b.fraction(t).data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
