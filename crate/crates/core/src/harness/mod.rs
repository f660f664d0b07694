//! Monte-Carlo validation of the bounds over dataset resamples, λ sweeps
//! over seeded pair families, and report files.
//!
//! Seeds: every resample owns `seed::derive(master_seed, [tag, n, r])`, so
//! results do not depend on evaluation order or on the number of worker
//! threads. Work runs on the ambient rayon pool; reductions are sequential in
//! resample order.

mod checks;
mod config;
mod report;
mod sweep;

pub use checks::{
    check_theorem1, check_theorem2, check_theorem3, convergence_dataset_seeds, violation_threshold,
    ConvergenceCell, ConvergenceStep, ExpectedBoundCell, HighProbabilityCell, DECAY_FACTOR,
};
pub use config::{EvalMetric, ExperimentConfig, PairSpec, DEFAULT_LAMBDA_GRID};
pub use report::{
    emit_reports, BoundCheckReport, CheckSummary, Report, BOUND_REPORT_FILE, SWEEP_EPSILON_FILE,
    SWEEP_LAMBDA_FILE, SWEEP_N_FILE, SWEEP_REPORT_FILE,
};
pub use sweep::{sweep, td_gap, BestLambda, SweepCell, SweepReport, TrendSummary};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
}

/// Mean, sample standard deviation and standard error, summed in order.
pub(crate) fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return Summary {
            mean,
            sd: 0.0,
            se: 0.0,
        };
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    Summary {
        mean,
        sd,
        se: sd / n.sqrt(),
    }
}

/// All three checks for every `ε` in the config.
pub fn check_bounds(config: &ExperimentConfig) -> Result<BoundCheckReport> {
    config.validate()?;
    let target = config.target()?;
    let seeds = convergence_dataset_seeds(config);
    let (mut e, mut h, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for &eps in &config.pair.epsilons {
        let pair = config.pair_for(&target, eps)?;
        e.extend(check_theorem1(&pair, eps, config)?);
        h.extend(check_theorem2(&pair, eps, config)?);
        c.extend(check_theorem3(&pair, eps, &seeds, config)?);
    }
    Ok(BoundCheckReport::new(e, h, c))
}
