//! Segmentation stress testing over acquisition-shift designs.

pub mod harness;
pub mod metrics;
pub mod plot;
pub mod predictor;
pub mod safe;
pub mod surface;

pub use harness::{run_stress_test, F1Sample, StressCase, StressOptions, StressTestReport};
pub use metrics::{lesion_f1, F1Mode};
pub use predictor::{builtin_threshold_segment, run_predictor, PredictorKind, PredictorSpec};
pub use safe::{safe_region, SafeRegion};
pub use surface::{evaluate_surface, fit_response_surface, SurfaceFit};
