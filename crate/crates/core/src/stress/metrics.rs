use serde::{Deserialize, Serialize};

use crate::components::connected_components_nonzero;
use crate::error::Result;
use crate::volume::{Connectivity, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// Detection F1 over connected lesion components.
    #[default]
    LesionWise,
    /// Dice over voxels.
    VoxelWise,
}

impl std::fmt::Display for F1Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            F1Mode::LesionWise => "lesion_wise",
            F1Mode::VoxelWise => "voxel_wise",
        })
    }
}

impl std::str::FromStr for F1Mode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lesion_wise" => Ok(F1Mode::LesionWise),
            "voxel_wise" => Ok(F1Mode::VoxelWise),
            other => Err(crate::error::Error::param(
                "f1_mode",
                format!("expected lesion_wise or voxel_wise, got `{other}`"),
            )),
        }
    }
}

fn f1(tp: usize, fp: usize, fnn: usize) -> f64 {
    if tp + fp + fnn == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
}

/// F1 between two binary masks (nonzero = lesion).
///
/// In lesion-wise mode a ground-truth component counts as detected when a
/// predicted component covers more than zero and at least `overlap_min` of
/// its voxels. Predicted components that detect nothing are false positives.
/// Components use 26-connectivity.
pub fn lesion_f1(pred: &Mask, gt: &Mask, mode: F1Mode, overlap_min: f64) -> Result<f64> {
    pred.grid().ensure_matches(gt.grid(), "prediction vs ground truth")?;
    match mode {
        F1Mode::VoxelWise => {
            let (mut tp, mut fp, mut fnn) = (0, 0, 0);
            for (&p, &g) in pred.data().iter().zip(gt.data()) {
                match (p != 0, g != 0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fnn += 1,
                    _ => {}
                }
            }
            Ok(f1(tp, fp, fnn))
        }
        F1Mode::LesionWise => {
            let gc = connected_components_nonzero(gt, Connectivity::TwentySix);
            let pc = connected_components_nonzero(pred, Connectivity::TwentySix);
            // overlap[g][p] in voxels
            let mut overlap = vec![vec![0usize; pc.count]; gc.count];
            for (&g, &p) in gc.labels.data().iter().zip(pc.labels.data()) {
                if g != 0 && p != 0 {
                    overlap[g as usize - 1][p as usize - 1] += 1;
                }
            }
            let mut pred_used = vec![false; pc.count];
            let mut tp = 0;
            for (g, row) in overlap.iter().enumerate() {
                let need = overlap_min * gc.sizes[g] as f64;
                let mut hit = false;
                for (p, &ov) in row.iter().enumerate() {
                    if ov > 0 && ov as f64 >= need {
                        hit = true;
                        pred_used[p] = true;
                    }
                }
                tp += usize::from(hit);
            }
            let fp = pred_used.iter().filter(|u| !**u).count();
            Ok(f1(tp, fp, gc.count - tp))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn mask(dims: [usize; 3], on: &[usize]) -> Mask {
        let g = Grid::new(dims, [1.0; 3]).unwrap();
        let mut d = vec![0u32; g.len()];
        for &i in on {
            d[i] = 1;
        }
        Mask::new(g, d).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = mask([8, 1, 1], &[1, 2, 5]);
        let b = mask([8, 1, 1], &[7]);
        for m in [F1Mode::LesionWise, F1Mode::VoxelWise] {
            assert_eq!(lesion_f1(&a, &a, m, 0.0).unwrap(), 1.0);
            assert_eq!(lesion_f1(&a, &b, m, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn empty_cases() {
        let e = mask([4, 1, 1], &[]);
        let a = mask([4, 1, 1], &[0]);
        for m in [F1Mode::LesionWise, F1Mode::VoxelWise] {
            assert_eq!(lesion_f1(&e, &e, m, 0.0).unwrap(), 1.0);
            assert_eq!(lesion_f1(&e, &a, m, 0.0).unwrap(), 0.0);
            assert_eq!(lesion_f1(&a, &e, m, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn one_hit_one_miss_one_false_positive() {
        // gt lesions at {0,1} and {4}; prediction hits {1} and adds {8}
        let gt = mask([10, 1, 1], &[0, 1, 4]);
        let pred = mask([10, 1, 1], &[1, 8]);
        assert_eq!(lesion_f1(&pred, &gt, F1Mode::LesionWise, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn overlap_threshold() {
        let gt = mask([10, 1, 1], &[0, 1, 2, 3]);
        let pred = mask([10, 1, 1], &[3]);
        assert_eq!(lesion_f1(&pred, &gt, F1Mode::LesionWise, 0.0).unwrap(), 1.0);
        // 1 of 4 voxels is below a 50% requirement: one FN and one FP
        assert_eq!(lesion_f1(&pred, &gt, F1Mode::LesionWise, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn voxel_mode_is_dice() {
        let gt = mask([6, 1, 1], &[0, 1, 2]);
        let pred = mask([6, 1, 1], &[1, 2, 3, 4]);
        // tp 2, fp 2, fn 1
        assert!((lesion_f1(&pred, &gt, F1Mode::VoxelWise, 0.0).unwrap() - 4.0 / 7.0).abs() < 1e-15);
    }
}
