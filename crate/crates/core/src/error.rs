use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A single failed invariant on an MDP, policy or distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub what: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.what, self.detail)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {kind}: {}", join(.violations))]
    Invalid {
        kind: &'static str,
        violations: Vec<Violation>,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite entry in Q-table at ({s}, {a})")]
    NonFinite { s: usize, a: usize },
    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("no convergence after {iters} iterations (residual {residual:e})")]
    NotConverged { iters: usize, residual: f64 },
    #[error("weighted update denominator is zero at cell ({s}, {a}); the cell is uncovered and lambda = 0")]
    ZeroDenominator { s: usize, a: usize },
    #[error("dataset does not cover {} state-action pair(s): {:?}", .0.len(), .0)]
    Uncovered(Vec<(usize, usize)>),
    #[error("{which} has zero probability at ({s}, {a})")]
    ZeroProbability {
        which: &'static str,
        s: usize,
        a: usize,
    },
    #[error("optimal weight is undefined when both variance and dynamics gap are zero")]
    UndefinedOptimalWeight,
    #[error("could not draw a covering dataset after {0} attempts")]
    CoverageRetriesExhausted(usize),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn join(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
