//! Classification of irregularly sampled multivariate time series without
//! imputation.
//!
//! The pipeline: raw event streams are aggregated into fixed-length
//! summarization windows ([`summarize`]), every observed cell becomes an
//! independent token via a scaled per-feature embedding ([`embed`]), and a
//! Transformer encoder consumes the token sequence with missing-value
//! masking applied in its first attention stack ([`model`]). Training uses
//! focal loss with validation-monitored early stopping ([`train`]),
//! evaluation reports AUPRC/AUROC/accuracy/c-index with bootstrap intervals
//! ([`metrics`]), and rollout attention explains which tokens drove a
//! prediction ([`explain`]).
//!
//! All gradients come from a small reverse-mode tape over a fixed operation
//! set ([`tape`]) and are verified against central finite differences
//! ([`gradcheck`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod explain;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod seed;
pub mod summarize;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

/// Crate-wide error type. The CLI maps these onto exit codes
/// (config = 2, data = 3, numeric = 4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
