//! Segmentation models under test: a built-in threshold segmenter and an
//! external-command protocol.
//!
//! External commands are given as a template. `{input}` and `{output}` are
//! replaced by absolute paths of the input image and of the mask the
//! command must write (NIfTI, nonzero = lesion, same grid as the input).
//! `{wm_region}` may be used to receive the WM search region. The template
//! is split into words like a POSIX shell would, but it is not run through
//! a shell.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::components::connected_components_nonzero;
use crate::error::{Error, Result};
use crate::nifti::load_volume;
use crate::volume::{Connectivity, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    #[default]
    BuiltinThreshold,
    ExternalCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    pub command_template: Option<String>,
    pub timeout_s: f64,
    pub max_parallel: usize,
    pub k_sigma: f64,
    pub min_lesion_voxels: usize,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec {
            kind: PredictorKind::BuiltinThreshold,
            command_template: None,
            timeout_s: 600.0,
            max_parallel: 1,
            k_sigma: 3.0,
            min_lesion_voxels: 3,
        }
    }
}

impl PredictorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(Error::param("predictor.timeout_s", "must be > 0"));
        }
        if self.max_parallel == 0 {
            return Err(Error::param("predictor.max_parallel", "must be >= 1"));
        }
        if !self.k_sigma.is_finite() {
            return Err(Error::param("predictor.k_sigma", "must be finite"));
        }
        if self.kind == PredictorKind::ExternalCommand {
            let t = self.command_template.as_deref().ok_or_else(|| {
                Error::param("predictor.command_template", "required for external_command")
            })?;
            for token in ["{input}", "{output}"] {
                let n = t.matches(token).count();
                if n != 1 {
                    return Err(Error::param(
                        "predictor.command_template",
                        format!("must contain {token} exactly once, found {n}"),
                    ));
                }
            }
            if t.matches("{wm_region}").count() > 1 {
                return Err(Error::param(
                    "predictor.command_template",
                    "{wm_region} may appear at most once",
                ));
            }
            if shlex::split(t).is_none_or(|w| w.is_empty()) {
                return Err(Error::param("predictor.command_template", "cannot be split into words"));
            }
        }
        Ok(())
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 0.0, 0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt(), v.len())
}

/// Lesions as hyperintense outliers within `wm_region`.
///
/// Candidates exceed `mu + k_sigma * sigma` of the region; `mu` and `sigma`
/// are re-estimated once without the first-pass candidates. Connected
/// components (26-connectivity) smaller than `min_voxels` are discarded.
pub fn builtin_threshold_segment(v: &Volume, wm_region: &Mask, k_sigma: f64, min_voxels: usize) -> Result<Mask> {
    v.grid().ensure_matches(wm_region.grid(), "image vs WM region")?;
    let data = v.data();
    let region = wm_region.data();
    let in_region = |i: usize| region[i] != 0;
    let (mu, sigma, n) = mean_std((0..data.len()).filter(|&i| in_region(i)).map(|i| data[i]));
    if n == 0 {
        return Err(Error::InvalidVolume("WM region is empty".into()));
    }
    let first = mu + k_sigma * sigma;
    let (mu, sigma, n2) = mean_std(
        (0..data.len())
            .filter(|&i| in_region(i) && data[i] <= first)
            .map(|i| data[i]),
    );
    let threshold = if n2 > 0 { mu + k_sigma * sigma } else { first };
    let cand: Vec<u32> = (0..data.len())
        .map(|i| u32::from(in_region(i) && data[i] > threshold))
        .collect();
    let cand = Mask::new(v.grid().clone(), cand)?;
    let comps = connected_components_nonzero(&cand, Connectivity::TwentySix);
    let out = comps
        .labels
        .data()
        .iter()
        .map(|&c| u32::from(c != 0 && comps.sizes[c as usize - 1] >= min_voxels))
        .collect();
    Mask::new(v.grid().clone(), out)
}

/// Paths and region handed to a predictor for one design point.
#[derive(Debug, Clone, Copy)]
pub struct PredictorInput<'a> {
    pub point_id: &'a str,
    pub image: &'a Path,
    pub wm_region: &'a Mask,
    pub wm_region_path: Option<&'a Path>,
    /// Scratch directory owned by this invocation.
    pub workdir: &'a Path,
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Runs the predictor on one image and returns its lesion mask.
pub fn run_predictor(spec: &PredictorSpec, input: &PredictorInput<'_>) -> Result<Mask> {
    let point = input.point_id.to_string();
    let image = load_volume(input.image).map_err(|e| Error::PredictorFailed {
        point: point.clone(),
        reason: format!("cannot read input: {e}"),
    })?;
    match spec.kind {
        PredictorKind::BuiltinThreshold => {
            builtin_threshold_segment(&image, input.wm_region, spec.k_sigma, spec.min_lesion_voxels)
        }
        PredictorKind::ExternalCommand => run_external(spec, input, &image),
    }
}

fn run_external(spec: &PredictorSpec, input: &PredictorInput<'_>, image: &Volume) -> Result<Mask> {
    let point = input.point_id.to_string();
    let fail = |reason: String| Error::PredictorFailed {
        point: point.clone(),
        reason,
    };
    let template = spec
        .command_template
        .as_deref()
        .ok_or_else(|| fail("no command template".into()))?;
    fs::create_dir_all(input.workdir).map_err(|e| Error::io(input.workdir, e))?;
    let output = absolute(&input.workdir.join("prediction.nii.gz"));
    let _ = fs::remove_file(&output);
    let in_path = absolute(input.image);
    let wm_path = input.wm_region_path.map(absolute);
    if template.contains("{wm_region}") && wm_path.is_none() {
        return Err(fail("template uses {wm_region} but no region file is available".into()));
    }

    let words: Vec<String> = shlex::split(template)
        .ok_or_else(|| fail("template cannot be split into words".into()))?
        .into_iter()
        .map(|w| {
            let mut w = w
                .replace("{input}", &in_path.to_string_lossy())
                .replace("{output}", &output.to_string_lossy());
            if let Some(p) = &wm_path {
                w = w.replace("{wm_region}", &p.to_string_lossy());
            }
            w
        })
        .collect();
    let log_path = input.workdir.join("predictor.log");
    let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let log_err = log.try_clone().map_err(|e| Error::io(&log_path, e))?;

    let mut child = Command::new(&words[0])
        .args(&words[1..])
        .current_dir(input.workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::from(log))
        .stderr(Stdio::from(log_err))
        .spawn()
        .map_err(|e| fail(format!("cannot start `{}`: {e}", words[0])))?;

    let limit = Duration::from_secs_f64(spec.timeout_s);
    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(s)) => break s,
            Ok(None) if start.elapsed() >= limit => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::PredictorTimeout {
                    point,
                    seconds: spec.timeout_s,
                });
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(fail(format!("wait failed: {e}"))),
        }
    };
    if !status.success() {
        return Err(fail(format!("{status}; see {}", log_path.display())));
    }

    let bad = |reason: String| Error::PredictorOutput {
        point: point.clone(),
        reason,
    };
    if !output.exists() {
        return Err(bad(format!("{} was not written", output.display())));
    }
    let mask = load_volume(&output).map_err(|e| bad(e.to_string()))?;
    if !mask.grid().matches(image.grid()) {
        return Err(bad(format!(
            "mask grid {:?} differs from input grid {:?}",
            mask.dims(),
            image.dims()
        )));
    }
    let data = mask.data().iter().map(|&v| u32::from(v != 0.0)).collect();
    Mask::new(image.grid().clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn block_image(bright: f64) -> Volume {
        let g = Grid::new([10, 10, 10], [1.0; 3]).unwrap();
        Volume::from_fn(g, |x, y, z| {
            if (3..7).contains(&x) && (3..7).contains(&y) && (3..7).contains(&z) {
                bright
            } else {
                10.0
            }
        })
        .unwrap()
    }

    #[test]
    fn constant_image_gives_empty_mask() {
        let v = Volume::filled(Grid::new([6, 6, 6], [1.0; 3]).unwrap(), 5.0).unwrap();
        let region = Mask::new(v.grid().clone(), vec![1; v.grid().len()]).unwrap();
        assert_eq!(builtin_threshold_segment(&v, &region, 3.0, 1).unwrap().count_nonzero(), 0);
    }

    #[test]
    fn bright_block_found_exactly() {
        let v = block_image(30.0);
        let region = Mask::new(v.grid().clone(), vec![1; v.grid().len()]).unwrap();
        let m = builtin_threshold_segment(&v, &region, 3.0, 3).unwrap();
        for (i, &l) in m.data().iter().enumerate() {
            assert_eq!(l != 0, v.data()[i] == 30.0);
        }
        let m = builtin_threshold_segment(&v, &region, 3.0, 70).unwrap();
        assert_eq!(m.count_nonzero(), 0);
    }

    #[test]
    fn template_validation() {
        let mut spec = PredictorSpec {
            kind: PredictorKind::ExternalCommand,
            command_template: Some("cp {input} {output}".into()),
            ..PredictorSpec::default()
        };
        spec.validate().unwrap();
        spec.command_template = Some("cp {input} {input} {output}".into());
        assert!(spec.validate().is_err());
        spec.command_template = Some("seg {input}".into());
        assert!(spec.validate().unwrap_err().to_string().contains("{output}"));
        spec.command_template = None;
        assert!(spec.validate().is_err());
    }
}
