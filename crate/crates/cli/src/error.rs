//! Error taxonomy mapped to process exit codes: configuration problems
//! exit 2, data problems 3, numeric failures 4.

use pointkey_core::autodiff::AutodiffError;
use pointkey_core::data::DataError;
use pointkey_core::geometry::GeometryError;
use pointkey_core::loss::LossError;
use pointkey_core::metrics::MetricError;
use pointkey_core::model::ModelError;
use pointkey_core::optim::OptimError;
use pointkey_core::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(format!("json: {e}"))
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig { .. } => CliError::Config(e.to_string()),
            ModelError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            ModelError::Geometry(g) => g.into(),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<OptimError> for CliError {
    fn from(e: OptimError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Loss(l) => l.into(),
            TrainError::Autodiff(a) => a.into(),
            TrainError::Optim(o) => o.into(),
            TrainError::EmptyBatch => CliError::Data(e.to_string()),
            TrainError::GradientCheckFailed { .. } => CliError::Numeric(e.to_string()),
        }
    }
}
