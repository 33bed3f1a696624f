//! Synthetic sources, layer chains, rate–distortion sweeps and reports.

pub mod chain;
pub mod report;
pub mod source;
pub mod sweep;

use thiserror::Error;

use crate::codec::{CodecError, ErrorClass};
use crate::stats::StatsError;
use crate::tensor::TensorError;

pub use chain::{calibrate_chain, calibrate_chain_clean, fold_agreement, run_chain, Chain, ChainRun, LayerChainSpec, LayerSpec};
pub use report::{emit_report, load_report, ReportFormat};
pub use source::{coding_gain, equicorrelated, identity_cov, GaussianRng, SyntheticSource};
pub use sweep::{block_shape_study, energy_ratio_report, rate_at_mse, rd_sweep, RateColumn, RateDistortionPoint, SweepOptions};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("report: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("covariance is not positive semidefinite (pivot {0:e})")]
    NotPositiveSemidefinite(f64),
    #[error("{0}")]
    Spec(String),
}

impl HarnessError {
    pub fn class(&self) -> ErrorClass {
        match self {
            Self::Codec(e) => e.class(),
            Self::Tensor(TensorError::Io(_)) | Self::Io(_) => ErrorClass::Io,
            Self::Csv(e) if e.is_io_error() => ErrorClass::Io,
            Self::Stats(StatsError::NoConvergence { .. } | StatsError::NotPositiveSemidefinite(_) | StatsError::NonFinite) => {
                ErrorClass::Numeric
            }
            Self::NotPositiveSemidefinite(_) => ErrorClass::Numeric,
            _ => ErrorClass::Validation,
        }
    }
}
