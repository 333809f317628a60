//! Quadratic response surface of F1 over (TE, TI):
//!
//! `F1 = c1 TE² + c2 TI² + c3 (TI TE)² + c4 TE + c5 TI + c6 TI TE + c7`
//!
//! The `(TI TE)²` column is optional and off by default. Fitting happens in
//! axis-scaled coordinates and the coefficients are converted back to
//! millisecond units.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMN_NAMES: [&str; 7] = ["TE^2", "TI^2", "(TI*TE)^2", "TE", "TI", "TI*TE", "1"];

/// Centre and half-range of each axis (and of `(TI TE)²`) used for scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisScaling {
    pub te_center: f64,
    pub te_half_range: f64,
    pub ti_center: f64,
    pub ti_half_range: f64,
    pub q_center: f64,
    pub q_half_range: f64,
}

impl AxisScaling {
    pub const IDENTITY: AxisScaling = AxisScaling {
        te_center: 0.0,
        te_half_range: 1.0,
        ti_center: 0.0,
        ti_half_range: 1.0,
        q_center: 0.0,
        q_half_range: 1.0,
    };

    fn from_points(points: &[(f64, f64)]) -> Self {
        let span = |vals: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            let half = 0.5 * (hi - lo);
            (0.5 * (hi + lo), if half > 0.0 { half } else { 1.0 })
        };
        let (te_center, te_half_range) = span(&mut points.iter().map(|p| p.0));
        let (ti_center, ti_half_range) = span(&mut points.iter().map(|p| p.1));
        let (q_center, q_half_range) = span(&mut points.iter().map(|p| (p.0 * p.1).powi(2)));
        AxisScaling {
            te_center,
            te_half_range,
            ti_center,
            ti_half_range,
            q_center,
            q_half_range,
        }
    }

    fn row(&self, te: f64, ti: f64) -> [f64; 7] {
        let u = (te - self.te_center) / self.te_half_range;
        let v = (ti - self.ti_center) / self.ti_half_range;
        let q = ((te * ti).powi(2) - self.q_center) / self.q_half_range;
        [u * u, v * v, q, u, v, u * v, 1.0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFit {
    /// `c1..c7` in millisecond units; `c3` is 0 when not fitted.
    pub coefficients: [f64; 7],
    pub include_c3: bool,
    pub r_squared: f64,
    pub ss_res: f64,
    pub ss_tot: f64,
    pub n_points: usize,
    pub scaling: AxisScaling,
    /// Coefficients of the same basis in scaled coordinates.
    pub scaled_coefficients: [f64; 7],
}

impl SurfaceFit {
    /// Surface with given coefficients and no fit statistics.
    pub fn from_coefficients(coefficients: [f64; 7], include_c3: bool) -> Self {
        let mut c = coefficients;
        if !include_c3 {
            c[2] = 0.0;
        }
        SurfaceFit {
            coefficients: c,
            include_c3,
            r_squared: 1.0,
            ss_res: 0.0,
            ss_tot: 0.0,
            n_points: 0,
            scaling: AxisScaling::IDENTITY,
            scaled_coefficients: c,
        }
    }

    /// Evaluation of the internal scaled polynomial.
    pub fn evaluate_scaled(&self, te: f64, ti: f64) -> f64 {
        let r = self.scaling.row(te, ti);
        r.iter().zip(self.scaled_coefficients).map(|(a, b)| a * b).sum()
    }
}

/// Evaluates the polynomial in millisecond units.
pub fn evaluate_surface(fit: &SurfaceFit, te: f64, ti: f64) -> f64 {
    let c = fit.coefficients;
    c[0] * te * te + c[1] * ti * ti + c[2] * (ti * te).powi(2) + c[3] * te + c[4] * ti + c[5] * ti * te + c[6]
}

/// Ordinary least squares on `(te, ti, y)` samples.
///
/// Needs at least 6 distinct points (7 with `include_c3`). A design that
/// cannot separate the basis columns is rejected with the columns that
/// add no rank.
pub fn fit_response_surface(samples: &[(f64, f64, f64)], include_c3: bool) -> Result<SurfaceFit> {
    let cols: Vec<usize> = if include_c3 { (0..7).collect() } else { vec![0, 1, 3, 4, 5, 6] };
    let mut distinct: Vec<(f64, f64)> = samples.iter().map(|s| (s.0, s.1)).collect();
    distinct.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    distinct.dedup();
    if distinct.len() < cols.len() {
        return Err(Error::FitFailed(format!(
            "response surface needs at least {} distinct (TE, TI) points, got {}",
            cols.len(),
            distinct.len()
        )));
    }
    if samples.iter().any(|s| !(s.0.is_finite() && s.1.is_finite() && s.2.is_finite())) {
        return Err(Error::FitFailed("non-finite sample".into()));
    }

    let scaling = AxisScaling::from_points(&distinct);
    let n = samples.len();
    let mut x = DMatrix::zeros(n, cols.len());
    for (i, s) in samples.iter().enumerate() {
        let row = scaling.row(s.0, s.1);
        for (j, &c) in cols.iter().enumerate() {
            x[(i, j)] = row[c];
        }
    }
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.2));

    // add columns from low to high order; a column that does not raise the
    // rank is a linear combination of those before it
    let mut offending = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let order = [6, 3, 4, 5, 0, 1, 2];
    for j in order.iter().filter_map(|c| cols.iter().position(|x| x == c)) {
        let mut trial = kept.clone();
        trial.push(j);
        if rank(&x.select_columns(trial.iter())) == trial.len() {
            kept = trial;
        } else {
            offending.push(COLUMN_NAMES[cols[j]].to_string());
        }
    }
    if !offending.is_empty() {
        return Err(Error::RankDeficient { columns: offending });
    }

    let beta = x
        .clone()
        .svd(true, true)
        .solve(&y, 0.0)
        .map_err(|e| Error::FitFailed(e.to_string()))?;
    let mut a = [0.0; 7];
    for (j, &c) in cols.iter().enumerate() {
        a[c] = beta[j];
    }

    let fitted = &x * &beta;
    let ss_res: f64 = (0..n).map(|i| (y[i] - fitted[i]).powi(2)).sum();
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if ss_tot < 1e-12 {
        if ss_res < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };

    Ok(SurfaceFit {
        coefficients: descale(&a, &scaling),
        include_c3,
        r_squared,
        ss_res,
        ss_tot,
        n_points: distinct.len(),
        scaling,
        scaled_coefficients: a,
    })
}

fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > max * 1e-10).count()
}

/// Expands the scaled polynomial into millisecond-unit coefficients.
fn descale(a: &[f64; 7], s: &AxisScaling) -> [f64; 7] {
    let (ct, ht, ci, hi, cq, hq) = (
        s.te_center,
        s.te_half_range,
        s.ti_center,
        s.ti_half_range,
        s.q_center,
        s.q_half_range,
    );
    let c1 = a[0] / (ht * ht);
    let c2 = a[1] / (hi * hi);
    let c3 = a[2] / hq;
    let c6 = a[5] / (ht * hi);
    let c4 = -2.0 * a[0] * ct / (ht * ht) + a[3] / ht - a[5] * ci / (ht * hi);
    let c5 = -2.0 * a[1] * ci / (hi * hi) + a[4] / hi - a[5] * ct / (ht * hi);
    let c7 = a[0] * ct * ct / (ht * ht) + a[1] * ci * ci / (hi * hi) - a[2] * cq / hq - a[3] * ct / ht - a[4] * ci / hi
        + a[5] * ct * ci / (ht * hi)
        + a[6];
    [c1, c2, c3, c4, c5, c6, c7]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<(f64, f64)> {
        let mut v = Vec::new();
        for i in 0..7 {
            for j in 0..7 {
                v.push((84.0 + 11.0 * i as f64, 2200.0 + 700.0 * j as f64 / 6.0));
            }
        }
        v
    }

    #[test]
    fn constant_response() {
        let s: Vec<_> = grid().into_iter().map(|(a, b)| (a, b, 0.42)).collect();
        let f = fit_response_surface(&s, false).unwrap();
        for c in &f.coefficients[..6] {
            assert!(c.abs() < 1e-12, "{c}");
        }
        assert!((f.coefficients[6] - 0.42).abs() < 1e-12);
        assert_eq!(f.r_squared, 1.0);
    }

    #[test]
    fn c3_recovery_when_included() {
        let c = [1e-5, -2e-8, 3e-15, 1e-3, 2e-4, -4e-7, 0.3];
        let truth = SurfaceFit::from_coefficients(c, true);
        let s: Vec<_> = grid()
            .into_iter()
            .map(|(a, b)| (a, b, evaluate_surface(&truth, a, b)))
            .collect();
        let f = fit_response_surface(&s, true).unwrap();
        for k in 0..7 {
            assert!(((f.coefficients[k] - c[k]) / c[k]).abs() < 1e-6, "c{} {} vs {}", k + 1, f.coefficients[k], c[k]);
        }
    }

    #[test]
    fn too_few_points() {
        let s: Vec<_> = grid().into_iter().take(5).map(|(a, b)| (a, b, 1.0)).collect();
        assert!(matches!(fit_response_surface(&s, false), Err(Error::FitFailed(_))));
    }

    #[test]
    fn single_te_column_is_rank_deficient() {
        // TE constant: TE² and TE collapse onto the intercept
        let s: Vec<_> = (0..8).map(|k| (100.0, 2200.0 + 100.0 * k as f64, 0.1 * k as f64)).collect();
        match fit_response_surface(&s, false) {
            Err(Error::FitFailed(_)) => {}
            Err(Error::RankDeficient { columns }) => {
                assert!(columns.iter().any(|c| c.contains("TE")), "{columns:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_te_levels_flag_the_quadratic_term() {
        let s: Vec<_> = [117.0, 150.0]
            .iter()
            .flat_map(|&te| [2200.0, 2550.0, 2900.0].map(|ti| (te, ti, 0.5)))
            .collect();
        match fit_response_surface(&s, false) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec!["TE^2"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn collinear_design_names_columns() {
        // points on the line TI = 2200 + 10 TE make TI and TI*TE dependent
        let s: Vec<_> = (0..9)
            .map(|k| {
                let te = 84.0 + 8.0 * k as f64;
                (te, 2200.0 + 10.0 * te, 0.5)
            })
            .collect();
        let err = fit_response_surface(&s, false).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }), "{err}");
    }
}
