use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::{summarize, Summary};
use crate::bounds::{
    analytic_sigma_max, analytic_xi_max, convergence_bound_rhs, dynamics_gap_xi,
    expected_bound_rhs, neighborhood_c, trace_maxima, varsigma, worst_case_bound_rhs, BoundInputs,
    ConvergenceInputs, CountsPolicy,
};
use crate::data::{beta_bounds, sample_covering_dataset, DomainPair, TransitionDataset};
use crate::error::{Error, Result};
use crate::mdp::{exact_backup, optimal_q, OperatorMode, QTable, VALUE_ITERATION_TOL};
use crate::seed;
use crate::solver::{
    expected_td_error_from_values, run_fqi, weighted_update_from_values, SolveConfig,
};

const TAG_ONE_STEP: u64 = 1;
const TAG_HIGH_PROB: u64 = 2;
const TAG_CONVERGENCE: u64 = 3;

/// Slack allowed between the geometric rate and the observed decay.
pub const DECAY_FACTOR: f64 = 1.01;

/// One (ε, n, λ, k) cell of the expected-bound check. `k` indexes the
/// comparator iterate `Q^k` the update starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedBoundCell {
    pub epsilon: f64,
    pub n: usize,
    pub lambda: f64,
    pub k: usize,
    pub m: usize,
    pub lhs_mean: f64,
    pub lhs_se: f64,
    pub xi: f64,
    pub varsigma_worst_case: f64,
    pub varsigma_realized_mean: f64,
    pub beta_l: f64,
    pub beta_u: f64,
    pub rhs_worst_case: f64,
    pub rhs_realized_mean: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighProbabilityCell {
    pub epsilon: f64,
    pub n: usize,
    pub lambda: f64,
    pub k: usize,
    pub m: usize,
    pub delta: f64,
    pub rhs: f64,
    pub violations: usize,
    pub fraction: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStep {
    /// Number of updates applied.
    pub k: usize,
    /// Mean of `Σ P_D |Q_λ^k − Q*|` over resamples.
    pub lhs_mean: f64,
    pub lhs_se: f64,
    pub lhs_sup_mean: f64,
    /// Bound with the analytic `σ_max`.
    pub rhs: f64,
    /// Bound with the trace estimate of `σ_max`; informational.
    pub rhs_trace: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCell {
    pub epsilon: f64,
    pub n: usize,
    pub lambda: f64,
    pub m: usize,
    pub init_dist_term: f64,
    pub beta_l: f64,
    pub beta_u: f64,
    pub sigma_max_analytic: f64,
    pub sigma_max_trace: f64,
    pub xi_max_trace: f64,
    pub xi_max_analytic: f64,
    pub neighborhood_c: f64,
    pub steps: Vec<ConvergenceStep>,
    /// Last step within `neighborhood_c + 3·SE`. Reported, not part of `pass`.
    pub final_pass: bool,
    /// For `λ = 1` with identical domains: every step within
    /// `DECAY_FACTOR · γ^k · init_dist_term`.
    pub geometric_decay_pass: Option<bool>,
    pub pass: bool,
}

fn check_resamples(m: usize, name: &'static str) -> Result<()> {
    if m < 2 {
        return Err(Error::OutOfRange {
            name,
            value: m as f64,
            range: "[2, inf)",
        });
    }
    Ok(())
}

/// `Q^0 = 0, Q^{k+1} = B_D Q^k` for `k < K`.
fn comparator(pair: &DomainPair, k_max: usize) -> Result<Vec<QTable>> {
    let t = &pair.target;
    let mut out = vec![QTable::zeros(t.num_states(), t.num_actions())];
    for _ in 0..k_max {
        let next = exact_backup(t, out.last().expect("non-empty"), &OperatorMode::Optimality)?;
        out.push(next);
    }
    Ok(out)
}

struct OneStepSample {
    beta: (f64, f64),
    /// `diffs[k * L + l]`.
    diffs: Vec<f64>,
    varsigma_realized: Vec<f64>,
}

fn one_step_sample(
    pair: &DomainPair,
    comp: &[QTable],
    grid: &[f64],
    n: usize,
    seed: u64,
    attempts: usize,
) -> Result<OneStepSample> {
    let mode = OperatorMode::Optimality;
    let (t, s) = (&pair.target, &pair.source);
    let ds = sample_covering_dataset(t, &pair.target_sa, n, seed, attempts)?;
    let beta = beta_bounds(&ds.empirical_dist(), &pair.source_sa, &pair.target_sa)?;
    let steps = comp.len() - 1;
    let mut diffs = Vec::with_capacity(steps * grid.len());
    let mut varsigma_realized = Vec::with_capacity(steps);
    for k in 0..steps {
        let v = mode.state_values(&comp[k]);
        let reference = expected_td_error_from_values(&comp[k + 1], &v, t, &pair.target_sa);
        for &lambda in grid {
            let q = weighted_update_from_values(&v, &ds, s, &pair.source_sa, lambda)?;
            diffs.push(expected_td_error_from_values(&q, &v, t, &pair.target_sa) - reference);
        }
        varsigma_realized.push(varsigma(
            &comp[k],
            t,
            CountsPolicy::Realized(ds.counts()),
            &mode,
        )?);
    }
    Ok(OneStepSample {
        beta,
        diffs,
        varsigma_realized,
    })
}

fn one_step_samples(
    pair: &DomainPair,
    comp: &[QTable],
    config: &ExperimentConfig,
    n: usize,
    tag: u64,
    m: usize,
) -> Result<Vec<OneStepSample>> {
    (0..m)
        .into_par_iter()
        .map(|r| {
            let seed = seed::derive(config.master_seed, &[tag, n as u64, r as u64]);
            one_step_sample(
                pair,
                comp,
                &config.lambda_grid,
                n,
                seed,
                config.max_coverage_attempts,
            )
        })
        .collect()
}

fn global_beta(betas: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    betas.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (l, h)| {
        (lo.min(l), hi.max(h))
    })
}

struct ComparatorTerms {
    comp: Vec<QTable>,
    xi: Vec<f64>,
    varsigma_worst: Vec<f64>,
}

fn comparator_terms(pair: &DomainPair, k_max: usize) -> Result<ComparatorTerms> {
    let mode = OperatorMode::Optimality;
    let comp = comparator(pair, k_max)?;
    let mut xi = Vec::with_capacity(k_max);
    let mut varsigma_worst = Vec::with_capacity(k_max);
    for q in &comp[..k_max] {
        xi.push(dynamics_gap_xi(q, &pair.target, &pair.source, &mode)?);
        varsigma_worst.push(varsigma(q, &pair.target, CountsPolicy::WorstCase, &mode)?);
    }
    Ok(ComparatorTerms {
        comp,
        xi,
        varsigma_worst,
    })
}

fn bound_inputs(
    pair: &DomainPair,
    config: &ExperimentConfig,
    lambda: f64,
    varsigma: f64,
    xi: f64,
    beta: (f64, f64),
    n: usize,
) -> BoundInputs {
    let t = &pair.target;
    BoundInputs {
        lambda,
        varsigma,
        xi,
        beta_l: beta.0,
        beta_u: beta.1,
        reward_bound: t.reward_bound(),
        gamma: t.discount(),
        num_states: t.num_states(),
        num_actions: t.num_actions(),
        n,
        delta: config.delta,
    }
}

/// Monte-Carlo check of the expected one-step bound: for each comparator
/// iterate `Q^k`, the mean over resampled datasets of
/// `E_D(Q_λ^{k+1}) − E_D(B_D Q^k)` against the bound with worst-case `ς`.
pub fn check_theorem1(
    pair: &DomainPair,
    epsilon: f64,
    config: &ExperimentConfig,
) -> Result<Vec<ExpectedBoundCell>> {
    config.validate()?;
    let m = config.num_resamples;
    check_resamples(m, "num_resamples")?;
    let k_max = config.num_iterations;
    let terms = comparator_terms(pair, k_max)?;
    let grid = &config.lambda_grid;
    let mut cells = Vec::new();
    for &n in &config.n_list {
        let samples = one_step_samples(pair, &terms.comp, config, n, TAG_ONE_STEP, m)?;
        let beta = global_beta(samples.iter().map(|s| s.beta));
        for k in 0..k_max {
            let (xi, vs) = (terms.xi[k], terms.varsigma_worst[k]);
            let vs_realized: Vec<f64> = samples.iter().map(|s| s.varsigma_realized[k]).collect();
            for (l, &lambda) in grid.iter().enumerate() {
                let lhs: Vec<f64> = samples
                    .iter()
                    .map(|s| s.diffs[k * grid.len() + l])
                    .collect();
                let Summary { mean, se, .. } = summarize(&lhs);
                let rhs = expected_bound_rhs(&bound_inputs(pair, config, lambda, vs, xi, beta, n));
                let realized: Vec<f64> = vs_realized
                    .iter()
                    .map(|&v| {
                        expected_bound_rhs(&bound_inputs(pair, config, lambda, v, xi, beta, n))
                    })
                    .collect();
                cells.push(ExpectedBoundCell {
                    epsilon,
                    n,
                    lambda,
                    k,
                    m,
                    lhs_mean: mean,
                    lhs_se: se,
                    xi,
                    varsigma_worst_case: vs,
                    varsigma_realized_mean: summarize(&vs_realized).mean,
                    beta_l: beta.0,
                    beta_u: beta.1,
                    rhs_worst_case: rhs,
                    rhs_realized_mean: summarize(&realized).mean,
                    pass: mean <= rhs + 3.0 * se,
                });
            }
        }
    }
    Ok(cells)
}

/// `δ + 3·sqrt(δ(1−δ)/M)`.
pub fn violation_threshold(delta: f64, m: usize) -> f64 {
    delta + 3.0 * (delta * (1.0 - delta) / m as f64).sqrt()
}

/// Fraction of resampled datasets whose realized one-step excess error
/// exceeds the high-probability bound.
pub fn check_theorem2(
    pair: &DomainPair,
    epsilon: f64,
    config: &ExperimentConfig,
) -> Result<Vec<HighProbabilityCell>> {
    config.validate()?;
    let m = config.high_prob_resamples();
    check_resamples(m, "high_prob_resamples")?;
    let k_max = config.num_iterations;
    let terms = comparator_terms(pair, k_max)?;
    let grid = &config.lambda_grid;
    let threshold = violation_threshold(config.delta, m);
    let mut cells = Vec::new();
    for &n in &config.n_list {
        let samples = one_step_samples(pair, &terms.comp, config, n, TAG_HIGH_PROB, m)?;
        let beta = global_beta(samples.iter().map(|s| s.beta));
        for k in 0..k_max {
            let (xi, vs) = (terms.xi[k], terms.varsigma_worst[k]);
            for (l, &lambda) in grid.iter().enumerate() {
                let rhs =
                    worst_case_bound_rhs(&bound_inputs(pair, config, lambda, vs, xi, beta, n));
                let violations = samples
                    .iter()
                    .filter(|s| s.diffs[k * grid.len() + l] > rhs)
                    .count();
                let fraction = violations as f64 / m as f64;
                cells.push(HighProbabilityCell {
                    epsilon,
                    n,
                    lambda,
                    k,
                    m,
                    delta: config.delta,
                    rhs,
                    violations,
                    fraction,
                    threshold,
                    pass: fraction <= threshold,
                });
            }
        }
    }
    Ok(cells)
}

struct TraceSample {
    beta: (f64, f64),
    /// Per λ: P_D-weighted and sup distances for iterates `1..=K`.
    expabs: Vec<Vec<f64>>,
    sup: Vec<Vec<f64>>,
    xi_max: Vec<f64>,
    sigma_max: Vec<f64>,
}

fn trace_sample(
    pair: &DomainPair,
    ds: &TransitionDataset,
    grid: &[f64],
    k_max: usize,
    q_star: &QTable,
) -> Result<TraceSample> {
    let mode = OperatorMode::Optimality;
    let beta = beta_bounds(&ds.empirical_dist(), &pair.source_sa, &pair.target_sa)?;
    let mut out = TraceSample {
        beta,
        expabs: Vec::with_capacity(grid.len()),
        sup: Vec::with_capacity(grid.len()),
        xi_max: Vec::with_capacity(grid.len()),
        sigma_max: Vec::with_capacity(grid.len()),
    };
    for &lambda in grid {
        let trace = run_fqi(pair, ds, &SolveConfig::new(lambda, k_max), Some(q_star))?;
        let maxima = trace_maxima(&trace, pair, ds, &mode)?;
        out.expabs.push(
            trace
                .diagnostics
                .iter()
                .map(|d| d.dist_expabs.expect("q_star given"))
                .collect(),
        );
        out.sup.push(
            trace
                .diagnostics
                .iter()
                .map(|d| d.dist_sup.expect("q_star given"))
                .collect(),
        );
        out.xi_max.push(maxima.xi_max_est);
        out.sigma_max.push(maxima.sigma_max_est);
    }
    Ok(out)
}

/// Convergence check: `run_fqi` from zero on each dataset, distance to `Q*`
/// per step against the bound with the analytic `σ_max` and the largest
/// `ξ` seen on any trace. `dataset_seeds[r]` seeds resample `r` (mixed with
/// `n`).
pub fn check_theorem3(
    pair: &DomainPair,
    epsilon: f64,
    dataset_seeds: &[u64],
    config: &ExperimentConfig,
) -> Result<Vec<ConvergenceCell>> {
    config.validate()?;
    let m = dataset_seeds.len();
    check_resamples(m, "convergence_resamples")?;
    let k_max = config.convergence_iterations();
    let t = &pair.target;
    let gamma = t.discount();
    let q_star = optimal_q(t, VALUE_ITERATION_TOL, 1_000_000)?;
    let init = QTable::zeros(t.num_states(), t.num_actions());
    let init_dist = init.sup_distance(&q_star);
    let sigma_analytic = analytic_sigma_max(t, &init);
    let xi_analytic = analytic_xi_max(pair, &init);
    let identical = pair.source.transitions() == t.transitions();
    let grid = &config.lambda_grid;

    let mut cells = Vec::new();
    for &n in &config.n_list {
        let samples: Vec<TraceSample> = dataset_seeds
            .par_iter()
            .map(|&s| {
                let ds = sample_covering_dataset(
                    t,
                    &pair.target_sa,
                    n,
                    seed::derive(s, &[n as u64]),
                    config.max_coverage_attempts,
                )?;
                trace_sample(pair, &ds, grid, k_max, &q_star)
            })
            .collect::<Result<_>>()?;
        let beta = global_beta(samples.iter().map(|s| s.beta));
        for (l, &lambda) in grid.iter().enumerate() {
            let xi_max = samples.iter().map(|s| s.xi_max[l]).fold(0.0, f64::max);
            let sigma_trace = samples.iter().map(|s| s.sigma_max[l]).fold(0.0, f64::max);
            let rhs_at = |k: usize, sigma: f64| {
                convergence_bound_rhs(&ConvergenceInputs {
                    lambda,
                    beta_l: beta.0,
                    beta_u: beta.1,
                    gamma,
                    sigma_max: sigma,
                    xi_max,
                    k: k as u64,
                    init_dist_term: init_dist,
                })
            };
            let mut steps = Vec::with_capacity(k_max);
            for j in 0..k_max {
                let lhs: Vec<f64> = samples.iter().map(|s| s.expabs[l][j]).collect();
                let sup: Vec<f64> = samples.iter().map(|s| s.sup[l][j]).collect();
                let Summary { mean, se, .. } = summarize(&lhs);
                // iterate j + 1 has seen j + 1 contractions
                let rhs = rhs_at(j, sigma_analytic);
                steps.push(ConvergenceStep {
                    k: j + 1,
                    lhs_mean: mean,
                    lhs_se: se,
                    lhs_sup_mean: summarize(&sup).mean,
                    rhs,
                    rhs_trace: rhs_at(j, sigma_trace),
                    pass: mean <= rhs + 3.0 * se,
                });
            }
            let c = neighborhood_c(lambda, beta.0, beta.1, gamma, sigma_analytic, xi_max);
            let last = steps.last().expect("k_max >= 1");
            let final_pass = last.lhs_mean <= c + 3.0 * last.lhs_se;
            let geometric_decay_pass = (identical && lambda == 1.0).then(|| {
                steps
                    .iter()
                    .all(|st| st.lhs_mean <= DECAY_FACTOR * gamma.powi(st.k as i32) * init_dist)
            });
            // the radius is a limit, so the last step can sit above it when K
            // is short; only the per-step bound decides the verdict
            let pass = steps.iter().all(|s| s.pass);
            cells.push(ConvergenceCell {
                epsilon,
                n,
                lambda,
                m,
                init_dist_term: init_dist,
                beta_l: beta.0,
                beta_u: beta.1,
                sigma_max_analytic: sigma_analytic,
                sigma_max_trace: sigma_trace,
                xi_max_trace: xi_max,
                xi_max_analytic: xi_analytic,
                neighborhood_c: c,
                steps,
                final_pass,
                geometric_decay_pass,
                pass,
            });
        }
    }
    Ok(cells)
}

/// Seeds of the convergence-check resamples.
pub fn convergence_dataset_seeds(config: &ExperimentConfig) -> Vec<u64> {
    (0..config.convergence_resamples())
        .map(|r| seed::derive(config.master_seed, &[TAG_CONVERGENCE, r as u64]))
        .collect()
}
