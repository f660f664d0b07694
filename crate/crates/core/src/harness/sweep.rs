use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{build_pair, build_target, EvalMetric, ExperimentConfig};
use super::summarize;
use crate::bounds::dynamics_gap_xi;
use crate::data::{sample_covering_dataset, DomainPair, TransitionDataset};
use crate::error::Result;
use crate::mdp::{
    backup_from_values, exact_backup, greedy_policy, policy_value, OperatorMode, QTable,
    VALUE_ITERATION_TOL,
};
use crate::seed;
use crate::solver::weighted_update_from_values;

const TAG_SWEEP: u64 = 4;

/// One (family, ε, n, λ) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub family: usize,
    pub epsilon: f64,
    pub n: usize,
    pub lambda: f64,
    /// `ξ` on the comparator iterate `Q^{K−1}`.
    pub xi: f64,
    pub m: usize,
    pub td_gap_mean: f64,
    pub td_gap_sd: f64,
    pub return_mean: f64,
    pub return_sd: f64,
    /// Whether this λ is the best on the grid for its (family, ε, n).
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestLambda {
    pub family: usize,
    pub epsilon: f64,
    pub n: usize,
    pub xi: f64,
    pub best_lambda: f64,
    pub best_metric_mean: f64,
}

/// How often the best λ moves in the expected direction along each axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    /// (family, n) sequences checked along decreasing ε.
    pub epsilon_sequences: usize,
    /// Of those, how many have a non-decreasing best λ.
    pub epsilon_monotone: usize,
    pub epsilon_fraction: f64,
    /// (family, ε) sequences checked along increasing n.
    pub n_sequences: usize,
    /// Of those, how many have a non-increasing best λ.
    pub n_monotone: usize,
    pub n_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub eval_metric: EvalMetric,
    pub num_families: usize,
    pub num_iterations: usize,
    pub lambda_grid: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub n_list: Vec<usize>,
    pub cells: Vec<SweepCell>,
    pub best: Vec<BestLambda>,
    pub trend: TrendSummary,
}

/// `Σ μ (Q_K − B_D Q_{K−1})²`: the target TD error of `Q_K` in excess of the
/// exact backup's.
pub fn td_gap(q: &QTable, q_prev: &QTable, pair: &DomainPair) -> Result<f64> {
    let b = exact_backup(&pair.target, q_prev, &OperatorMode::Optimality)?;
    Ok(q.values()
        .iter()
        .zip(b.values())
        .zip(pair.target_sa.probs())
        .map(|((x, y), w)| w * (x - y) * (x - y))
        .sum())
}

/// Runs `k_max` weighted updates from zero and returns `(Q_{K−1}, Q_K)`.
fn iterate(
    pair: &DomainPair,
    ds: &TransitionDataset,
    lambda: f64,
    k_max: usize,
) -> Result<(QTable, QTable)> {
    let mode = OperatorMode::Optimality;
    let t = &pair.target;
    let mut prev = QTable::zeros(t.num_states(), t.num_actions());
    let mut q = prev.clone();
    for _ in 0..k_max {
        let next = weighted_update_from_values(
            &mode.state_values(&q),
            ds,
            &pair.source,
            &pair.source_sa,
            lambda,
        )?;
        prev = std::mem::replace(&mut q, next);
    }
    Ok((prev, q))
}

/// `(td_gap, policy return)` per (ε, λ), flattened ε-major.
fn evaluate(
    pairs: &[DomainPair],
    ds: &TransitionDataset,
    grid: &[f64],
    k_max: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(pairs.len() * grid.len());
    for pair in pairs {
        for &lambda in grid {
            let (prev, q) = iterate(pair, ds, lambda, k_max)?;
            let gap = td_gap(&q, &prev, pair)?;
            let ret = policy_value(&pair.target, &greedy_policy(&q), VALUE_ITERATION_TOL)?;
            out.push((gap, ret));
        }
    }
    Ok(out)
}

/// Index of the best mean; ties go to the earlier (smaller) λ when the grid
/// is sorted ascending.
fn best_index(grid: &[f64], means: &[f64], metric: EvalMetric) -> usize {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
    let better = |x: f64, y: f64| match metric {
        EvalMetric::TDGap => x < y,
        EvalMetric::PolicyReturn => x > y,
    };
    let mut best = order[0];
    for &i in &order[1..] {
        if better(means[i], means[best]) {
            best = i;
        }
    }
    best
}

/// Grid over (λ, ε, n) for `num_families` seeded target/source families.
/// Datasets are drawn from the target only, so each (family, n, resample)
/// dataset is shared by every ε and λ.
pub fn sweep(config: &ExperimentConfig) -> Result<SweepReport> {
    config.validate()?;
    let grid = &config.lambda_grid;
    let eps = &config.pair.epsilons;
    let k_max = config.num_iterations;
    let m = config.num_resamples;
    let mode = OperatorMode::Optimality;

    let mut families = Vec::with_capacity(config.num_families);
    for f in 0..config.num_families {
        let (rs, ds) = config.family_seeds(f);
        let target = build_target(&config.pair, rs, ds)?;
        let pairs = eps
            .iter()
            .map(|&e| build_pair(&target, e, ds))
            .collect::<Result<Vec<_>>>()?;
        // comparator Q^{K−1}
        let mut comp = QTable::zeros(target.num_states(), target.num_actions());
        for _ in 1..k_max {
            comp = backup_from_values(&target, &mode.state_values(&comp));
        }
        let xis = pairs
            .iter()
            .map(|p| dynamics_gap_xi(&comp, &p.target, &p.source, &mode))
            .collect::<Result<Vec<_>>>()?;
        families.push((pairs, xis));
    }

    let units: Vec<(usize, usize, usize)> = (0..config.num_families)
        .flat_map(|f| (0..config.n_list.len()).flat_map(move |ni| (0..m).map(move |r| (f, ni, r))))
        .collect();
    let results: Vec<Vec<(f64, f64)>> = units
        .par_iter()
        .map(|&(f, ni, r)| {
            let n = config.n_list[ni];
            let pairs = &families[f].0;
            let s = seed::derive(
                config.master_seed,
                &[TAG_SWEEP, f as u64, n as u64, r as u64],
            );
            let ds = sample_covering_dataset(
                &pairs[0].target,
                &pairs[0].target_sa,
                n,
                s,
                config.max_coverage_attempts,
            )?;
            evaluate(pairs, &ds, grid, k_max)
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    let mut best = Vec::new();
    // best λ per (family, ε index, n index)
    let mut best_grid = vec![vec![vec![0.0; config.n_list.len()]; eps.len()]; config.num_families];
    for f in 0..config.num_families {
        for (ei, &epsilon) in eps.iter().enumerate() {
            for (ni, &n) in config.n_list.iter().enumerate() {
                let base = (f * config.n_list.len() + ni) * m;
                let runs = &results[base..base + m];
                let mut row = Vec::with_capacity(grid.len());
                for (l, &lambda) in grid.iter().enumerate() {
                    let idx = ei * grid.len() + l;
                    let gaps: Vec<f64> = runs.iter().map(|v| v[idx].0).collect();
                    let rets: Vec<f64> = runs.iter().map(|v| v[idx].1).collect();
                    let (g, r) = (summarize(&gaps), summarize(&rets));
                    row.push(SweepCell {
                        family: f,
                        epsilon,
                        n,
                        lambda,
                        xi: families[f].1[ei],
                        m,
                        td_gap_mean: g.mean,
                        td_gap_sd: g.sd,
                        return_mean: r.mean,
                        return_sd: r.sd,
                        best: false,
                    });
                }
                let means: Vec<f64> = row
                    .iter()
                    .map(|c| match config.eval_metric {
                        EvalMetric::TDGap => c.td_gap_mean,
                        EvalMetric::PolicyReturn => c.return_mean,
                    })
                    .collect();
                let b = best_index(grid, &means, config.eval_metric);
                row[b].best = true;
                best_grid[f][ei][ni] = grid[b];
                best.push(BestLambda {
                    family: f,
                    epsilon,
                    n,
                    xi: families[f].1[ei],
                    best_lambda: grid[b],
                    best_metric_mean: means[b],
                });
                cells.extend(row);
            }
        }
    }

    let trend = trend_summary(&best_grid, eps, &config.n_list);
    Ok(SweepReport {
        eval_metric: config.eval_metric,
        num_families: config.num_families,
        num_iterations: k_max,
        lambda_grid: grid.clone(),
        epsilons: eps.clone(),
        n_list: config.n_list.clone(),
        cells,
        best,
        trend,
    })
}

fn trend_summary(best: &[Vec<Vec<f64>>], eps: &[f64], n_list: &[usize]) -> TrendSummary {
    let mut eps_order: Vec<usize> = (0..eps.len()).collect();
    eps_order.sort_by(|&a, &b| eps[b].total_cmp(&eps[a]));
    let mut n_order: Vec<usize> = (0..n_list.len()).collect();
    n_order.sort_by_key(|&i| n_list[i]);

    let (mut es, mut em, mut ns, mut nm) = (0, 0, 0, 0);
    for fam in best {
        for ni in n_order.iter().copied() {
            let seq: Vec<f64> = eps_order.iter().map(|&ei| fam[ei][ni]).collect();
            es += 1;
            em += seq.windows(2).all(|w| w[0] <= w[1]) as usize;
        }
        for row in fam {
            let seq: Vec<f64> = n_order.iter().map(|&ni| row[ni]).collect();
            ns += 1;
            nm += seq.windows(2).all(|w| w[0] >= w[1]) as usize;
        }
    }
    TrendSummary {
        epsilon_sequences: es,
        epsilon_monotone: em,
        epsilon_fraction: em as f64 / es as f64,
        n_sequences: ns,
        n_monotone: nm,
        n_fraction: nm as f64 / ns as f64,
    }
}
