//! Closed-form FLAIR physics and relaxometry.
//!
//! The inversion-recovery factor is used in magnitude, matching magnitude
//! reconstructed clinical images:
//!
//! `S = rho * |1 - 2 exp(-TI/T1) + exp(-(TR - TE_last)/T1)| * exp(-TE/T2)`
//!
//! All times are in milliseconds.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{levenberg_marquardt, StopRule};

/// Contrast-governing sequence timings (ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceParams {
    #[serde(rename = "te_ms")]
    pub te: f64,
    #[serde(rename = "ti_ms")]
    pub ti: f64,
    #[serde(rename = "tr_ms")]
    pub tr: f64,
    #[serde(rename = "te_last_ms")]
    pub te_last: f64,
}

impl SequenceParams {
    /// Validates `0 < TE < TI < TR` and `0 < TE_last < TR`. A missing
    /// `te_last` defaults to `2 * TE`.
    pub fn new(te: f64, ti: f64, tr: f64, te_last: Option<f64>) -> Result<Self> {
        let seq = SequenceParams {
            te,
            ti,
            tr,
            te_last: te_last.unwrap_or(2.0 * te),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.te, self.ti, self.tr, self.te_last]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::param("sequence", "timings must be finite"));
        }
        if !(self.te > 0.0 && self.te < self.ti && self.ti < self.tr) {
            return Err(Error::param(
                "sequence",
                format!(
                    "require 0 < TE < TI < TR, got TE={} TI={} TR={}",
                    self.te, self.ti, self.tr
                ),
            ));
        }
        if !(self.te_last > 0.0 && self.te_last < self.tr) {
            return Err(Error::param(
                "sequence",
                format!(
                    "require 0 < TE_last < TR, got TE_last={} TR={}",
                    self.te_last, self.tr
                ),
            ));
        }
        Ok(())
    }

    /// Same TR and TE_last, new TE/TI.
    pub fn with_te_ti(&self, te: f64, ti: f64) -> Result<Self> {
        SequenceParams::new(te, ti, self.tr, Some(self.te_last))
    }
}

/// Spin density and relaxation times of one tissue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub rho: f64,
    #[serde(rename = "t1_ms")]
    pub t1: f64,
    #[serde(rename = "t2_ms")]
    pub t2: f64,
}

impl TissueParams {
    pub fn new(rho: f64, t1: f64, t2: f64) -> Result<Self> {
        let p = TissueParams { rho, t1, t2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::param("rho", format!("must be >= 0, got {}", self.rho)));
        }
        if !(self.t2.is_finite() && self.t1.is_finite() && self.t2 > 0.0 && self.t2 <= self.t1) {
            return Err(Error::param(
                "relaxation",
                format!("require 0 < T2 <= T1, got T1={} T2={}", self.t1, self.t2),
            ));
        }
        Ok(())
    }
}

/// Signed inversion-recovery factor `1 - 2 e^{-TI/T1} + e^{-(TR-TE_last)/T1}`.
#[inline]
pub fn recovery_factor(t1: f64, seq: &SequenceParams) -> f64 {
    1.0 - 2.0 * (-seq.ti / t1).exp() + (-(seq.tr - seq.te_last) / t1).exp()
}

/// FLAIR magnitude signal for one tissue.
#[inline]
pub fn flair_signal(tis: &TissueParams, seq: &SequenceParams) -> f64 {
    tis.rho * recovery_factor(tis.t1, seq).abs() * (-seq.te / tis.t2).exp()
}

/// Inversion time that nulls a tissue with longitudinal relaxation `t1`.
pub fn null_inversion_time(t1: f64, tr: f64, te_last: f64) -> f64 {
    let recovered = (-(tr - te_last) / t1).exp();
    t1 * (2.0 / (1.0 + recovered)).ln()
}

/// Relative signal sensitivities in percent per ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivity {
    pub ds_dt1: f64,
    pub ds_dt2: f64,
}

/// Analytic `100 * (dS/dT1) / S` and `100 * (dS/dT2) / S`.
pub fn signal_sensitivity(tis: &TissueParams, seq: &SequenceParams) -> Result<Sensitivity> {
    let s = flair_signal(tis, seq);
    let r = recovery_factor(tis.t1, seq);
    if !(s > 0.0) || r == 0.0 {
        return Err(Error::param(
            "signal",
            "relative sensitivity is undefined at zero signal",
        ));
    }
    let t1sq = tis.t1 * tis.t1;
    let decay = seq.tr - seq.te_last;
    let dr_dt1 =
        -2.0 * (-seq.ti / tis.t1).exp() * seq.ti / t1sq + (-decay / tis.t1).exp() * decay / t1sq;
    // d|R|/dT1 / |R| == dR/dT1 / R away from the null
    Ok(Sensitivity {
        ds_dt1: 100.0 * dr_dt1 / r,
        ds_dt2: 100.0 * seq.te / (tis.t2 * tis.t2),
    })
}

/// T2 from two echoes of a mono-exponential decay.
pub fn t2_dual_echo(s1: f64, s2: f64, te1: f64, te2: f64) -> Result<f64> {
    if !(te2 > te1 && te1 > 0.0) {
        return Err(Error::param(
            "echo_times",
            format!("require TE2 > TE1 > 0, got {te1}, {te2}"),
        ));
    }
    if !(s1 > 0.0 && s2 > 0.0 && s1.is_finite() && s2.is_finite()) {
        return Err(Error::Estimation(format!(
            "dual-echo T2 needs positive signals, got {s1}, {s2}"
        )));
    }
    if s1 <= s2 {
        return Err(Error::Estimation(format!(
            "dual-echo T2 undefined: S1={s1} does not exceed S2={s2}"
        )));
    }
    Ok((te2 - te1) / (s1 / s2).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatRecoverySample {
    /// Saturation delay (ms).
    pub td: f64,
    pub signal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatRecoveryFit {
    pub amplitude: f64,
    pub t1: f64,
    /// Sum of squared residuals.
    pub residual: f64,
    pub iterations: usize,
}

/// Least-squares fit of `S(TD) = A (1 - exp(-TD/T1))`.
///
/// Starts from `A = max signal`, `T1 = median TD` and stops on a relative
/// parameter change below 1e-10 or after 500 iterations.
pub fn t1_saturation_recovery_fit(samples: &[SatRecoverySample]) -> Result<SatRecoveryFit> {
    if samples.len() < 3 {
        return Err(Error::param(
            "samples",
            format!("need at least 3 saturation delays, got {}", samples.len()),
        ));
    }
    if samples.iter().any(|s| !(s.td > 0.0 && s.td.is_finite() && s.signal.is_finite())) {
        return Err(Error::param("samples", "delays must be positive and signals finite"));
    }
    if samples.windows(2).any(|w| w[1].td <= w[0].td) {
        return Err(Error::param("samples", "delays must be strictly increasing"));
    }
    let first = samples[0].signal;
    if samples.iter().all(|s| s.signal == first) {
        return Err(Error::FitFailed(
            "saturation-recovery series is flat; T1 is not identifiable".into(),
        ));
    }

    let td: Vec<f64> = samples.iter().map(|s| s.td).collect();
    let sig: Vec<f64> = samples.iter().map(|s| s.signal).collect();
    let a0 = sig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(a0 > 0.0) {
        return Err(Error::FitFailed("no positive signal in series".into()));
    }
    let mut sorted = td.clone();
    sorted.sort_by(f64::total_cmp);
    let t1_0 = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let lower = [a0 * 1e-9, sorted[0] * 1e-3];
    let upper = [a0 * 1e9, sorted[sorted.len() - 1] * 1e3];

    let res = levenberg_marquardt(
        &[a0, t1_0],
        &lower,
        &upper,
        td.len(),
        |p, r| {
            for i in 0..td.len() {
                r[i] = p[0] * (1.0 - (-td[i] / p[1]).exp()) - sig[i];
            }
        },
        |p, j: &mut DMatrix<f64>| {
            for i in 0..td.len() {
                let e = (-td[i] / p[1]).exp();
                j[(i, 0)] = 1.0 - e;
                j[(i, 1)] = -p[0] * e * td[i] / (p[1] * p[1]);
            }
        },
        StopRule::default(),
    );
    let [a, t1] = [res.params[0], res.params[1]];
    let on_bound = t1 <= lower[1] * (1.0 + 1e-12) || t1 >= upper[1] * (1.0 - 1e-12);
    if !(a.is_finite() && t1.is_finite()) || on_bound {
        return Err(Error::FitFailed(format!(
            "saturation-recovery fit did not converge (A={a}, T1={t1})"
        )));
    }
    Ok(SatRecoveryFit {
        amplitude: a,
        t1,
        residual: res.cost,
        iterations: res.iterations,
    })
}
