use thiserror::Error;

use crate::model::ValidationReport;

/// Errors raised while building or querying a [`Model`](crate::Model).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid chain: {0}")]
    InvalidChain(ValidationReport),
    #[error("assignment has no candidate for task `{task}` at step `{step}`")]
    IncompleteAssignment { task: String, step: String },
    #[error("assignment picks candidate #{candidate} for task `{task}` at step `{step}`, which has only {available}")]
    CandidateOutOfRange {
        task: String,
        step: String,
        candidate: usize,
        available: usize,
    },
    #[error("assignment references unknown {what} `{id}`")]
    UnknownReference { what: &'static str, id: String },
}

/// Errors raised by the analytic response-time operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticError {
    #[error(
        "station {station} is unstable: utilization {rho:.6} (arrival {lambda_eff}, service {mu})"
    )]
    Unstable {
        station: String,
        lambda_eff: f64,
        mu: f64,
        rho: f64,
    },
    #[error("branch probabilities sum to {sum}, expected 1")]
    InvalidProbabilities { sum: f64 },
    #[error("invalid rate: {0}")]
    InvalidRate(String),
    #[error("structure has no stations")]
    EmptyStructure,
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors raised by the discrete-event simulator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("refusing to simulate: station {station} has utilization {rho:.6} >= 1")]
    UnstableModel { station: String, rho: f64 },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("analytic and simulated task sets differ: {0}")]
    ModelMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors raised by the assignment search.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComposeError {
    #[error("search space of {count} assignments exceeds the cap of {cap}")]
    SearchSpaceTooLarge { count: u128, cap: u64 },
    #[error("no assignment keeps every station stable ({evaluated} evaluated)")]
    NoStableAssignment { evaluated: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}
