use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),

    #[error("invalid model input: {0}")]
    InvalidModel(String),

    #[error("fixed-effects matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("numerical breakdown at variance components ({0:.6e}, {1:.6e}, {2:.6e})")]
    NumericalBreakdown(f64, f64, f64),

    #[error("degrees of freedom unavailable: {0}")]
    DfUnavailable(String),

    #[error("{estimator} estimator failed in cluster {cluster}: {reason}")]
    EstimatorFailure {
        estimator: &'static str,
        cluster: usize,
        reason: String,
    },

    #[error("invalid scenario configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient replicates: {0}")]
    InsufficientReplicates(String),
}
