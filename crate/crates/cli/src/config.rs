//! Run configuration: one TOML file, every section optional.
//!
//! ```toml
//! schema_version = 1
//! output_dir = "out"
//! max_parallel = 4
//!
//! [inputs]
//! flair = "study/flair.nii.gz"
//! t1w = "study/t1w.nii.gz"
//! tissue_mask = "study/tissue_mask.nii.gz"
//! lesion_mask = "study/lesion_mask.nii.gz"
//!
//! [sequence]
//! te_ms = 140
//! ti_ms = 2800
//! tr_ms = 11000
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use flairshift::estimation::{BuildConfig, FitOptions, PriorRanges, TissueParamSet};
use flairshift::phantom::PhantomConfig;
use flairshift::pv::PvOptions;
use flairshift::shift::{DesignKind, DomainSpec};
use flairshift::signal::SequenceParams;
use flairshift::stress::{F1Mode, PredictorSpec, StressOptions};
use flairshift::volume::TissueLabel;
use serde::Deserialize;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config value `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

pub fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub max_parallel: usize,
    pub inputs: Inputs,
    pub sequence: SequenceSection,
    pub priors: PriorRanges,
    pub pv: PvSection,
    pub fit: FitOptions,
    pub domain: DomainSection,
    pub synthesis: SynthesisSection,
    pub predictor: PredictorSpec,
    pub stress: StressSection,
    pub phantom: PhantomConfig,
    pub sensitivity: SensitivitySection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("flairshift_out"),
            max_parallel: 1,
            inputs: Inputs::default(),
            sequence: SequenceSection::default(),
            priors: PriorRanges::default(),
            pv: PvSection::default(),
            fit: FitOptions::default(),
            domain: DomainSection::default(),
            synthesis: SynthesisSection::default(),
            predictor: PredictorSpec::default(),
            stress: StressSection::default(),
            phantom: PhantomConfig::default(),
            sensitivity: SensitivitySection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub flair: Option<PathBuf>,
    pub t1w: Option<PathBuf>,
    pub tissue_mask: Option<PathBuf>,
    pub lesion_mask: Option<PathBuf>,
    /// Scan-model directory written by `estimate`.
    pub model: Option<PathBuf>,
    pub case_id: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceSection {
    pub te_ms: Option<f64>,
    pub ti_ms: Option<f64>,
    pub tr_ms: Option<f64>,
    pub te_last_ms: Option<f64>,
}

impl SequenceSection {
    /// All of TE, TI and TR must be given.
    pub fn require(&self) -> Result<SequenceParams, ConfigError> {
        let te = self.te_ms.ok_or_else(|| invalid("sequence.te_ms", "is required"))?;
        let ti = self.ti_ms.ok_or_else(|| invalid("sequence.ti_ms", "is required"))?;
        let tr = self.tr_ms.ok_or_else(|| invalid("sequence.tr_ms", "is required"))?;
        SequenceParams::new(te, ti, tr, self.te_last_ms).map_err(|e| invalid("sequence", e.to_string()))
    }

    /// Missing timings are taken from `fallback`.
    pub fn or(&self, fallback: &SequenceParams) -> Result<SequenceParams, ConfigError> {
        let te = self.te_ms.unwrap_or(fallback.te);
        SequenceParams::new(
            te,
            self.ti_ms.unwrap_or(fallback.ti),
            self.tr_ms.unwrap_or(fallback.tr),
            self.te_last_ms.or(if self.te_ms.is_some() { None } else { Some(fallback.te_last) }),
        )
        .map_err(|e| invalid("sequence", e.to_string()))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        for (key, v) in [
            ("sequence.te_ms", self.te_ms),
            ("sequence.ti_ms", self.ti_ms),
            ("sequence.tr_ms", self.tr_ms),
            ("sequence.te_last_ms", self.te_last_ms),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(invalid(key, format!("must be a positive number of ms, got {v}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PvSection {
    pub band: usize,
    pub erosion: usize,
    /// Minimum fraction for a voxel to count as pure tissue.
    pub pure_threshold: f64,
}

impl Default for PvSection {
    fn default() -> Self {
        let pv = PvOptions::default();
        PvSection {
            band: pv.band,
            erosion: pv.erosion,
            pure_threshold: BuildConfig::default().pure_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    pub te_min_ms: f64,
    pub te_max_ms: f64,
    pub ti_min_ms: f64,
    pub ti_max_ms: f64,
    pub n_te: usize,
    pub n_ti: usize,
    pub design: DesignKind,
}

impl Default for DomainSection {
    fn default() -> Self {
        let d = DomainSpec::default();
        DomainSection {
            te_min_ms: d.te_min_ms,
            te_max_ms: d.te_max_ms,
            ti_min_ms: d.ti_min_ms,
            ti_max_ms: d.ti_max_ms,
            n_te: d.n_te,
            n_ti: d.n_ti,
            design: DesignKind::Grid,
        }
    }
}

impl DomainSection {
    pub fn spec(&self) -> DomainSpec {
        DomainSpec {
            te_min_ms: self.te_min_ms,
            te_max_ms: self.te_max_ms,
            ti_min_ms: self.ti_min_ms,
            ti_max_ms: self.ti_max_ms,
            n_te: self.n_te,
            n_ti: self.n_ti,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSection {
    pub texture_scale: f64,
    pub composite_skull: bool,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        SynthesisSection {
            texture_scale: 1.0,
            composite_skull: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub model: PathBuf,
    pub ground_truth: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StressSection {
    pub f1_mode: F1Mode,
    pub overlap_min: f64,
    pub include_c3: bool,
    pub safe_drop: f64,
    pub resolution: usize,
    pub wm_threshold: f64,
    pub baseline_te_ms: Option<f64>,
    pub baseline_ti_ms: Option<f64>,
    pub cases: Vec<CaseEntry>,
}

impl Default for StressSection {
    fn default() -> Self {
        let o = StressOptions::default();
        StressSection {
            f1_mode: o.f1_mode,
            overlap_min: o.overlap_min,
            include_c3: o.include_c3,
            safe_drop: o.safe_drop,
            resolution: o.resolution,
            wm_threshold: o.wm_threshold,
            baseline_te_ms: None,
            baseline_ti_ms: None,
            cases: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    T1,
    #[default]
    T2,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivitySection {
    pub tissue: TissueLabel,
    pub sweep: SweepParam,
    /// Sweep range; defaults depend on the swept parameter.
    pub range_ms: Option<[f64; 2]>,
    pub n: usize,
    /// Fixed tissue values; unset ones come from the default initial set.
    pub rho: Option<f64>,
    pub t1_ms: Option<f64>,
    pub t2_ms: Option<f64>,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        SensitivitySection {
            tissue: TissueLabel::Wm,
            sweep: SweepParam::T2,
            range_ms: None,
            n: 161,
            rho: None,
            t1_ms: None,
            t2_ms: None,
        }
    }
}

impl SensitivitySection {
    pub fn range(&self) -> [f64; 2] {
        self.range_ms.unwrap_or(match self.sweep {
            SweepParam::T1 => [500.0, 5000.0],
            SweepParam::T2 => [40.0, 200.0],
        })
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Config::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Config, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        let i = &mut self.inputs;
        for p in [&mut i.flair, &mut i.t1w, &mut i.tissue_mask, &mut i.lesion_mask, &mut i.model]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        for c in &mut self.stress.cases {
            resolve(base, &mut c.model);
            resolve(base, &mut c.ground_truth);
        }
    }

    /// Checks every section against its module's preconditions.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = |e: flairshift::Error| match e {
            flairshift::Error::InvalidParameter { name, reason } => ConfigError::Invalid { key: name, reason },
            other => invalid("config", other.to_string()),
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.max_parallel == 0 {
            return Err(invalid("max_parallel", "must be >= 1"));
        }
        self.sequence.validate()?;
        self.priors.validate().map_err(core)?;
        self.build_config()?.pv.validate().map_err(core)?;
        if !(self.pv.pure_threshold > 0.0 && self.pv.pure_threshold <= 1.0) {
            return Err(invalid("pv.pure_threshold", "must lie in (0, 1]"));
        }
        self.fit.validate().map_err(core)?;
        self.domain.spec().validate().map_err(core)?;
        if !(self.synthesis.texture_scale.is_finite() && self.synthesis.texture_scale >= 0.0) {
            return Err(invalid("synthesis.texture_scale", "must be >= 0"));
        }
        self.predictor.validate().map_err(core)?;
        let s = &self.stress;
        if !(0.0..=1.0).contains(&s.overlap_min) {
            return Err(invalid("stress.overlap_min", "must lie in [0, 1]"));
        }
        if !(s.safe_drop.is_finite() && s.safe_drop >= 0.0) {
            return Err(invalid("stress.safe_drop", "must be >= 0"));
        }
        if s.resolution < 2 {
            return Err(invalid("stress.resolution", "must be >= 2"));
        }
        if !(s.wm_threshold > 0.0 && s.wm_threshold <= 1.0) {
            return Err(invalid("stress.wm_threshold", "must lie in (0, 1]"));
        }
        if s.baseline_te_ms.is_some() != s.baseline_ti_ms.is_some() {
            return Err(invalid("stress.baseline_te_ms", "baseline_te_ms and baseline_ti_ms go together"));
        }
        for (k, c) in s.cases.iter().enumerate() {
            if c.id.is_empty() || c.id.contains(['/', '\\']) {
                return Err(invalid(&format!("stress.cases[{k}].id"), "must be a non-empty file name"));
            }
        }
        self.phantom.validate().map_err(core)?;
        let v = &self.sensitivity;
        if v.n < 2 {
            return Err(invalid("sensitivity.n", "must be >= 2"));
        }
        let [lo, hi] = v.range();
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(invalid("sensitivity.range_ms", format!("require 0 < lo < hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn build_config(&self) -> Result<BuildConfig, ConfigError> {
        Ok(BuildConfig {
            pv: PvOptions {
                band: self.pv.band,
                erosion: self.pv.erosion,
            },
            fit: self.fit,
            pure_threshold: self.pv.pure_threshold,
            init: TissueParamSet::default_init(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let c = Config::parse("").unwrap();
        c.validate().unwrap();
        assert_eq!(c.max_parallel, 1);
    }

    #[test]
    fn unknown_key_is_located() {
        let e = Config::parse("[fit]\nlamda = 0.1\n").unwrap_err();
        assert!(e.contains("lamda"), "{e}");
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn missing_tr_is_named() {
        let c = Config::parse("[sequence]\nte_ms = 140\nti_ms = 2800\n").unwrap();
        assert!(c.sequence.require().unwrap_err().to_string().contains("sequence.tr_ms"));
    }

    #[test]
    fn bad_values_name_their_key() {
        for (text, key) in [
            ("max_parallel = 0", "max_parallel"),
            ("schema_version = 2", "schema_version"),
            ("[domain]\nn_te = 1", "domain.n_te"),
            ("[stress]\nsafe_drop = -1.0", "stress.safe_drop"),
            ("[sequence]\ntr_ms = -5.0", "sequence.tr_ms"),
            ("[sensitivity]\nrange_ms = [100.0, 50.0]", "sensitivity.range_ms"),
        ] {
            let e = Config::parse(text).unwrap().validate().unwrap_err().to_string();
            assert!(e.contains(key), "{text}: {e}");
        }
    }

    #[test]
    fn sequence_fallback_keeps_te_last_only_without_new_te() {
        let base = SequenceParams::new(140.0, 2800.0, 11000.0, Some(300.0)).unwrap();
        let s = SequenceSection {
            tr_ms: Some(9000.0),
            ..Default::default()
        };
        assert_eq!(s.or(&base).unwrap().te_last, 300.0);
        let s = SequenceSection {
            te_ms: Some(100.0),
            ..Default::default()
        };
        assert_eq!(s.or(&base).unwrap().te_last, 200.0);
    }
}
