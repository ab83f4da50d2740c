use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::divergence::DivergenceError;
use crate::memory::MemoryError;
use crate::metrics::MetricsError;
use crate::predictor::PredictorError;
use crate::trainer::TrainerError;

/// Crate-level error, wrapping the per-module error enums.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or missing input (schema, shapes, configuration).
    Input,
    /// Not enough data for a requested estimate.
    InsufficientData,
    /// Non-finite values or a solver that failed to converge.
    Numerical,
    Other,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Variant name of the innermost error, e.g. `MissingColumn`.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Data(e) => e.name(),
            Error::Predictor(e) => e.name(),
            Error::Divergence(e) => e.name(),
            Error::Memory(e) => e.name(),
            Error::Trainer(e) => e.name(),
            Error::Metrics(e) => e.name(),
            Error::Io { .. } => "Io",
            Error::Json { .. } => "Json",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Data(_) | Error::Json { .. } => ErrorClass::Input,
            Error::Divergence(DivergenceError::InsufficientData { .. }) => {
                ErrorClass::InsufficientData
            }
            Error::Divergence(DivergenceError::NonFiniteLoss { .. })
            | Error::Predictor(PredictorError::NonFinite(_))
            | Error::Trainer(TrainerError::NonFiniteInput)
            | Error::Trainer(TrainerError::MaxIterations { .. }) => ErrorClass::Numerical,
            Error::Predictor(PredictorError::ShapeMismatch(_))
            | Error::Divergence(DivergenceError::ShapeMismatch(_))
            | Error::Divergence(DivergenceError::DimensionMismatch { .. })
            | Error::Divergence(DivergenceError::BadLambda(_))
            | Error::Divergence(DivergenceError::BadWeight(_))
            | Error::Divergence(DivergenceError::KTooLarge { .. })
            | Error::Divergence(DivergenceError::EmptyConditions)
            | Error::Trainer(TrainerError::ShapeMismatch(_))
            | Error::Trainer(TrainerError::BadConfig(_))
            | Error::Trainer(TrainerError::EmptyBatch(_))
            | Error::Trainer(TrainerError::EmptySequence)
            | Error::Memory(_)
            | Error::Metrics(_) => ErrorClass::Input,
            _ => ErrorClass::Other,
        }
    }
}
