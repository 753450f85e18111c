use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("time index {t} outside [{min}, {max}]")]
    TimeOutOfRange { t: usize, min: usize, max: usize },

    #[error("unsupported capability: {0}")]
    UnsupportedCapability(String),

    #[error("noise predictor failed at step t={step}: {source}")]
    PredictorFailure {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("missing asset for `{entry}`: {}", path.display())]
    MissingAsset { entry: String, path: PathBuf },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("reference mismatch: {0}")]
    ReferenceMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::PredictorFailure {
            step,
            source: Box::new(self),
        }
    }

    /// Labels the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through step and stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::PredictorFailure { source, .. } | Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) fn ensure_shape(expected: &[usize], got: &[usize]) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        })
    }
}
