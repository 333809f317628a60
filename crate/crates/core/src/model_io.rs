//! On-disk scan-model directory: one NIfTI file per map plus
//! `manifest.toml`.
//!
//! Manifest keys (unknown keys are ignored on read):
//!
//! ```toml
//! tool_version = "0.1.0"
//! kappa = 137.5
//! fit_residual = 1.2e-9
//!
//! [sequence]
//! te_ms = 140.0
//! ti_ms = 2800.0
//! tr_ms = 11000.0
//! te_last_ms = 280.0
//!
//! [tissues.wm]
//! rho = 1.0
//! t1_ms = 1007.0
//! t2_ms = 69.0
//! provenance = "fitted"
//! ```
//!
//! with the same table for `gm`, `csf` and `lesion`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{Provenance, ScanModel, TissueParamSet};
use crate::nifti::{load_mask, load_volume, save_mask, save_volume};
use crate::pv::PVMaps;
use crate::signal::{SequenceParams, TissueParams};
use crate::volume::TissueLabel;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TissueEntry {
    rho: f64,
    t1_ms: f64,
    t2_ms: f64,
    #[serde(default = "default_provenance")]
    provenance: Provenance,
}

fn default_provenance() -> Provenance {
    Provenance::Prior
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    tool_version: String,
    kappa: f64,
    #[serde(default)]
    fit_residual: f64,
    sequence: SequenceParams,
    tissues: BTreeMap<TissueLabel, TissueEntry>,
}

fn map_file(dir: &Path, stem: &str) -> std::path::PathBuf {
    dir.join(format!("{stem}.nii.gz"))
}

fn pv_stem(t: TissueLabel) -> String {
    format!("pv_{}", t.name())
}

/// Writes every map and the manifest into `dir`, creating it if needed.
pub fn save_scan_model(model: &ScanModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in TissueLabel::ALL {
        save_volume(model.pv().fraction(t), map_file(dir, &pv_stem(t)))?;
    }
    save_volume(model.texture(), map_file(dir, "texture"))?;
    save_volume(model.baseline(), map_file(dir, "baseline"))?;
    save_mask(model.brain_mask(), map_file(dir, "brain_mask"))?;

    let tissues = TissueLabel::ALL
        .iter()
        .map(|&t| {
            let p = model.params().get(t);
            (
                t,
                TissueEntry {
                    rho: p.rho,
                    t1_ms: p.t1,
                    t2_ms: p.t2,
                    provenance: model.params().provenance(t),
                },
            )
        })
        .collect();
    let manifest = Manifest {
        tool_version: TOOL_VERSION.to_string(),
        kappa: model.kappa(),
        fit_residual: model.params().residual(),
        sequence: *model.baseline_seq(),
        tissues,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Reads a directory written by [`save_scan_model`].
pub fn load_scan_model(dir: impl AsRef<Path>) -> Result<ScanModel> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;

    let mut params = Vec::with_capacity(4);
    let mut provenance = Vec::with_capacity(4);
    for t in TissueLabel::ALL {
        let e = manifest
            .tissues
            .get(&t)
            .ok_or_else(|| Error::Manifest(format!("missing [tissues.{t}] table")))?;
        params.push(TissueParams {
            rho: e.rho,
            t1: e.t1_ms,
            t2: e.t2_ms,
        });
        provenance.push(e.provenance);
    }
    let params = TissueParamSet::new(
        params.try_into().expect("four tissues"),
        provenance.try_into().expect("four tissues"),
        manifest.fit_residual,
    )
    .map_err(|e| Error::Manifest(e.to_string()))?;
    manifest
        .sequence
        .validate()
        .map_err(|e| Error::Manifest(e.to_string()))?;

    let brain = load_mask(map_file(dir, "brain_mask"))?.binarized();
    let mut fractions = Vec::with_capacity(4);
    for t in TissueLabel::ALL {
        fractions.push(load_volume(map_file(dir, &pv_stem(t)))?);
    }
    let pv = PVMaps::new(fractions.try_into().expect("four tissues"), brain)?;
    let texture = load_volume(map_file(dir, "texture"))?;
    let baseline = load_volume(map_file(dir, "baseline"))?;
    ScanModel::new(manifest.kappa, params, pv, texture, manifest.sequence, baseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{compute_texture, mixture_signal};
    use crate::volume::{Grid, Mask, Volume};

    fn small_model() -> ScanModel {
        let g = Grid::new([6, 5, 4], [1.0, 1.0, 3.0]).unwrap();
        let n = g.len();
        let wm: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 0.5 } else { 1.0 }).collect();
        let gm: Vec<f64> = wm.iter().map(|w| 1.0 - w).collect();
        let vol = |d: Vec<f64>| Volume::new(g.clone(), d).unwrap();
        let pv = PVMaps::new(
            [vol(wm), vol(gm), vol(vec![0.0; n]), vol(vec![0.0; n])],
            Mask::new(g.clone(), vec![1; n]).unwrap(),
        )
        .unwrap();
        let params = TissueParamSet::default_init();
        let seq = SequenceParams::new(140.0, 2800.0, 11000.0, None).unwrap();
        let mix = mixture_signal(&pv, &params, &seq);
        let baseline = vol(mix.iter().enumerate().map(|(i, m)| 100.0 * m + (i % 7) as f64 * 0.25).collect());
        let tex = compute_texture(&baseline, 100.0, &pv, &params, &seq).unwrap();
        ScanModel::new(100.0, params, pv, tex, seq, baseline).unwrap()
    }

    #[test]
    fn round_trip_preserves_model() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model();
        save_scan_model(&model, dir.path()).unwrap();
        let back = load_scan_model(dir.path()).unwrap();
        assert_eq!(back.kappa(), model.kappa());
        assert_eq!(back.params(), model.params());
        assert_eq!(back.baseline_seq(), model.baseline_seq());
        assert_eq!(back.brain_mask(), model.brain_mask());
        assert!(back.reconstruction_error() < 1e-6);
    }

    #[test]
    fn unknown_manifest_keys_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        save_scan_model(&small_model(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut text = fs::read_to_string(&path).unwrap();
        text = format!("scanner = \"unknown\"\n{text}\n[extra]\nnote = 1\n");
        fs::write(&path, text).unwrap();
        load_scan_model(dir.path()).unwrap();
    }

    #[test]
    fn missing_tissue_table_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_scan_model(&small_model(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let cut = text.find("[tissues.lesion]").unwrap();
        fs::write(&path, &text[..cut]).unwrap();
        let err = load_scan_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("lesion"), "{err}");
    }
}
