use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shift::{linspace, DesignPoint, DomainSpec};
use crate::stress::surface::{evaluate_surface, SurfaceFit};

/// Where the fitted F1 stays within `drop` of its baseline value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeRegion {
    pub te: Vec<f64>,
    pub ti: Vec<f64>,
    /// `safe[i * ti.len() + j]` refers to `(te[i], ti[j])`.
    pub safe: Vec<bool>,
    pub baseline_te: f64,
    pub baseline_ti: f64,
    pub baseline_f1: f64,
    pub drop: f64,
    pub safe_fraction: f64,
    /// Safe TE interval along the line through the baseline, within the domain.
    pub te_interval: Option<(f64, f64)>,
    pub ti_interval: Option<(f64, f64)>,
}

impl SafeRegion {
    pub fn is_safe(&self, i: usize, j: usize) -> bool {
        self.safe[i * self.ti.len() + j]
    }
}

/// Connected part, containing `x0`, of `{x : a x² + b x + c >= 0}`,
/// intersected with `[lo, hi]`. `None` if `x0` itself is not in the set.
fn interval_through(a: f64, b: f64, c: f64, x0: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let g = |x: f64| (a * x + b) * x + c;
    if g(x0) < 0.0 {
        return None;
    }
    let scale = a.abs().max(b.abs() / x0.abs().max(1.0)).max(f64::MIN_POSITIVE);
    let (mut left, mut right) = (lo, hi);
    if a.abs() <= 1e-300 || a.abs() < 1e-14 * scale {
        if b > 0.0 {
            left = left.max(-c / b);
        } else if b < 0.0 {
            right = right.min(-c / b);
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc > 0.0 {
            // numerically stable pair of roots
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            let (r1, r2) = {
                let (p, s) = (q / a, c / q);
                (p.min(s), p.max(s))
            };
            if a < 0.0 {
                left = left.max(r1);
                right = right.min(r2);
            } else if x0 <= r1 {
                right = right.min(r1);
            } else {
                left = left.max(r2);
            }
        }
    }
    (left <= right).then_some((left, right))
}

/// Marks a `resolution × resolution` grid over `domain` and solves for the
/// safe intervals through the baseline point along each axis.
pub fn safe_region(
    fit: &SurfaceFit,
    baseline: &DesignPoint,
    drop: f64,
    domain: &DomainSpec,
    resolution: usize,
) -> Result<SafeRegion> {
    if !(drop.is_finite() && drop >= 0.0) {
        return Err(Error::param("stress.safe_drop", format!("must be >= 0, got {drop}")));
    }
    if resolution < 2 {
        return Err(Error::param("stress.resolution", "must be >= 2"));
    }
    domain.validate()?;
    let te = linspace(domain.te_min_ms, domain.te_max_ms, resolution);
    let ti = linspace(domain.ti_min_ms, domain.ti_max_ms, resolution);
    let f0 = evaluate_surface(fit, baseline.te, baseline.ti);
    let threshold = f0 - drop;
    let safe: Vec<bool> = te
        .iter()
        .flat_map(|&a| ti.iter().map(move |&b| (a, b)))
        .map(|(a, b)| evaluate_surface(fit, a, b) >= threshold)
        .collect();
    let safe_fraction = safe.iter().filter(|s| **s).count() as f64 / safe.len() as f64;

    let c = fit.coefficients;
    let (t0, i0) = (baseline.te, baseline.ti);
    // F1 along TE at fixed TI, and along TI at fixed TE
    let te_interval = interval_through(
        c[0] + c[2] * i0 * i0,
        c[3] + c[5] * i0,
        c[1] * i0 * i0 + c[4] * i0 + c[6] - threshold,
        t0,
        domain.te_min_ms,
        domain.te_max_ms,
    );
    let ti_interval = interval_through(
        c[1] + c[2] * t0 * t0,
        c[4] + c[5] * t0,
        c[0] * t0 * t0 + c[3] * t0 + c[6] - threshold,
        i0,
        domain.ti_min_ms,
        domain.ti_max_ms,
    );
    Ok(SafeRegion {
        te,
        ti,
        safe,
        baseline_te: t0,
        baseline_ti: i0,
        baseline_f1: f0,
        drop,
        safe_fraction,
        te_interval,
        ti_interval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paraboloid() -> SurfaceFit {
        // 0.7 - 1e-4 (TE - 117)^2
        SurfaceFit::from_coefficients([-1e-4, 0.0, 0.0, 2.0 * 117.0 * 1e-4, 0.0, 0.0, 0.7 - 1e-4 * 117.0 * 117.0], false)
    }

    #[test]
    fn analytic_half_width() {
        let r = safe_region(&paraboloid(), &DesignPoint::new(117.0, 2550.0), 0.04, &DomainSpec::default(), 101).unwrap();
        let (lo, hi) = r.te_interval.unwrap();
        assert!((lo - 97.0).abs() < 1e-9 && (hi - 137.0).abs() < 1e-9, "{lo} {hi}");
        assert_eq!(r.ti_interval, Some((2200.0, 2900.0)));
    }

    #[test]
    fn reflexive_at_zero_drop() {
        let r = safe_region(&paraboloid(), &DesignPoint::new(117.0, 2550.0), 0.0, &DomainSpec::default(), 101).unwrap();
        assert!(r.is_safe(50, 50));
    }

    #[test]
    fn large_drop_is_all_safe() {
        let r = safe_region(&paraboloid(), &DesignPoint::new(117.0, 2550.0), 1.0, &DomainSpec::default(), 101).unwrap();
        assert_eq!(r.safe_fraction, 1.0);
    }

    #[test]
    fn negative_drop_rejected() {
        assert!(safe_region(&paraboloid(), &DesignPoint::new(117.0, 2550.0), -0.1, &DomainSpec::default(), 11).is_err());
    }

    #[test]
    fn convex_direction_takes_the_baseline_side() {
        // F1 = (TE - 100)^2 / 1000, baseline at 140 → safe for TE >= 100 + sqrt(1000 (1.6 - d))
        let fit = SurfaceFit::from_coefficients([1e-3, 0.0, 0.0, -0.2, 0.0, 0.0, 10.0], false);
        let r = safe_region(&fit, &DesignPoint::new(140.0, 2500.0), 0.6, &DomainSpec::default(), 11).unwrap();
        let (lo, hi) = r.te_interval.unwrap();
        assert!((lo - (100.0 + 1000f64.sqrt())).abs() < 1e-9);
        assert_eq!(hi, 150.0);
    }
}
