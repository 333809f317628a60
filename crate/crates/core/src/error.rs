use std::path::PathBuf;

use thiserror::Error;

use crate::volume::TissueLabel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage, attached to errors raised while building a scan model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PartialVolume,
    PureTissueMeans,
    TissueFit,
    Kappa,
    Texture,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::PartialVolume => "partial-volume estimation",
            Stage::PureTissueMeans => "pure-tissue means",
            Stage::TissueFit => "tissue parameter fit",
            Stage::Kappa => "kappa estimation",
            Stage::Texture => "texture map",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid NIfTI file {path}: {reason}")]
    Nifti { path: PathBuf, reason: String },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("tissue {0} is absent from the mask")]
    MissingTissue(TissueLabel),

    #[error("tissue {tissue} has only {found} pure voxels (need at least {required})")]
    TooFewPureVoxels {
        tissue: TissueLabel,
        found: usize,
        required: usize,
    },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("rank-deficient design; offending basis columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("predictor failed at {point}: {reason}")]
    PredictorFailed { point: String, reason: String },

    #[error("predictor timed out at {point} after {seconds} s")]
    PredictorTimeout { point: String, seconds: f64 },

    #[error("predictor output invalid at {point}: {reason}")]
    PredictorOutput { point: String, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at(self, stage: Stage) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
