//! FLAIR acquisition-shift simulation and segmentation stress testing.
//!
//! A baseline FLAIR study is decomposed into partial-volume maps, apparent
//! tissue parameters, a scale factor and a residual texture
//! ([`estimation::build_scan_model`]). The resulting [`estimation::ScanModel`]
//! re-synthesizes the scan for other echo and inversion times
//! ([`shift::synthesize`]); [`stress::run_stress_test`] feeds those images to
//! a segmenter and fits F1 as a quadratic function of TE and TI.

pub mod components;
pub mod error;
pub mod estimation;
pub mod model_io;
pub mod nifti;
pub mod optim;
pub mod phantom;
pub mod pv;
pub mod shift;
pub mod signal;
pub mod stress;
pub mod volume;

pub use error::{Error, Result, Stage};
