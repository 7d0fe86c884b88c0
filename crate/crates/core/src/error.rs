use thiserror::Error;

use crate::nlp::NlpSolution;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("integration failed at node {node} (t = {time}): non-finite state")]
    IntegrationFailure { node: usize, time: f64 },

    #[error("non-finite {what} evaluation at iterate (|z|_inf = {z_norm:e})")]
    Evaluation {
        what: &'static str,
        z_norm: f64,
        z: Vec<f64>,
    },

    #[error("solver did not converge: {status:?} after {iterations} iterations")]
    NotConverged {
        status: crate::nlp::SolveStatus,
        iterations: usize,
        solution: Box<NlpSolution>,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("iteration cap of {cap} reached without a clean sequence")]
    IterationCap { cap: usize },

    #[error("malformed solution: {0}")]
    Malformed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
