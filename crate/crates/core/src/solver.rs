//! The λ-weighted fitted Q-iteration.
//!
//! Each step minimizes `(1 − λ)·(empirical target TD error) + λ·(exact source
//! TD error)` over Q-tables. The objective separates per cell, and its
//! minimizer at `(s, a)` is
//!
//! ```text
//!         (1−λ)/N · Σ_j B̂_{s'_j} Q(s,a)  +  λ P_D'(s,a) · (B_D' Q)(s,a)
//! Q'(s,a) = ---------------------------------------------------------------
//!                    (1−λ) P_D̂(s,a)  +  λ P_D'(s,a)
//! ```
//!
//! [`weighted_update`] evaluates it as a convex combination of the per-cell
//! sample mean and the source backup. [`brute_force_minimizer`] minimizes the
//! same objective numerically and never touches the closed form.

use std::io::Write;

use crate::bounds::{self, dynamics_gap_xi};
use crate::data::{DomainPair, SamplingDistribution, TransitionDataset};
use crate::error::{Error, Result};
use crate::mdp::{self, backup_from_values, OperatorMode, QTable, TabularMdp};

#[derive(Debug, Clone)]
pub struct SolveConfig {
    pub lambda: f64,
    pub mode: OperatorMode,
    pub num_iterations: usize,
    /// Defaults to the all-zero table.
    pub init_q: Option<QTable>,
}

impl SolveConfig {
    pub fn new(lambda: f64, num_iterations: usize) -> Self {
        Self {
            lambda,
            mode: OperatorMode::Optimality,
            num_iterations,
            init_q: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.num_iterations == 0 {
            return Err(Error::OutOfRange {
                name: "num_iterations",
                value: 0.0,
                range: "[1, inf)",
            });
        }
        Ok(())
    }
}

/// Diagnostics for the step producing `Q_λ^k` from `Q_λ^{k−1}`.
///
/// `xi_k` and `var_term_k` are evaluated on the step's input `Q_λ^{k−1}`;
/// the TD errors and distances on its output `Q_λ^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationDiagnostics {
    pub k: usize,
    pub emp_td: f64,
    pub exact_td_target: f64,
    pub xi_k: f64,
    /// Largest `σ²/N(s,a)` over covered cells.
    pub var_term_k: f64,
    /// `Σ P_D(s,a) |Q_λ^k(s,a) − Q*(s,a)|`.
    pub dist_expabs: Option<f64>,
    pub dist_sup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    /// `Q_λ^0 … Q_λ^K`.
    pub q_history: Vec<QTable>,
    pub diagnostics: Vec<IterationDiagnostics>,
}

impl SolveTrace {
    pub fn final_q(&self) -> &QTable {
        self.q_history
            .last()
            .expect("trace holds at least the initial table")
    }

    pub const CSV_HEADER: &'static str =
        "k,emp_td,exact_td_target,xi_k,var_term_k,dist_expabs,dist_sup";

    /// One row per iteration. Missing distances are left empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for d in &self.diagnostics {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                d.k,
                d.emp_td,
                d.exact_td_target,
                d.xi_k,
                d.var_term_k,
                opt(d.dist_expabs),
                opt(d.dist_sup)
            )?;
        }
        Ok(())
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "lambda",
            value: lambda,
            range: "[0, 1]",
        })
    }
}

fn check_dataset(mdp: &TabularMdp, dataset: &TransitionDataset) -> Result<()> {
    if dataset.num_states() != mdp.num_states() || dataset.num_actions() != mdp.num_actions() {
        return Err(Error::Shape("dataset shape differs from MDP".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Shape("dataset is empty".into()));
    }
    Ok(())
}

/// `(1/N) Σ_i (Q(s_i,a_i) − B̂_{s'_i} Q_prev(s_i,a_i))²`, rewards and discount
/// taken from `mdp`.
pub fn empirical_td_error(
    q: &QTable,
    q_prev: &QTable,
    dataset: &TransitionDataset,
    mdp: &TabularMdp,
    mode: &OperatorMode,
) -> Result<f64> {
    check_dataset(mdp, dataset)?;
    mdp::check_inputs(mdp, q_prev, mode)?;
    let v = mode.state_values(q_prev);
    let g = mdp.discount();
    let total: f64 = dataset
        .triples()
        .iter()
        .map(|t| {
            let err = q.get(t.s, t.a) - (mdp.reward(t.s, t.a) + g * v[t.sp]);
            err * err
        })
        .sum();
    Ok(total / dataset.len() as f64)
}

/// `Σ_{s,a} μ(s,a) Σ_{s'} P(s'|s,a) (Q(s,a) − B̂_{s'} Q_prev(s,a))²`.
pub fn expected_td_error(
    q: &QTable,
    q_prev: &QTable,
    mdp: &TabularMdp,
    sa_dist: &SamplingDistribution,
    mode: &OperatorMode,
) -> Result<f64> {
    mdp::check_inputs(mdp, q_prev, mode)?;
    Ok(expected_td_error_from_values(
        q,
        &mode.state_values(q_prev),
        mdp,
        sa_dist,
    ))
}

pub(crate) fn expected_td_error_from_values(
    q: &QTable,
    v: &[f64],
    mdp: &TabularMdp,
    sa_dist: &SamplingDistribution,
) -> f64 {
    let g = mdp.discount();
    let mut total = 0.0;
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            let base = q.get(s, a) - mdp.reward(s, a);
            let inner: f64 = mdp
                .row(s, a)
                .iter()
                .zip(v)
                .map(|(p, x)| {
                    let e = base - g * x;
                    p * e * e
                })
                .sum();
            total += sa_dist.prob(s, a) * inner;
        }
    }
    total
}

/// Closed-form minimizer of the λ-weighted objective.
///
/// Cells without samples fall back to the source backup when `λ > 0`; with
/// `λ = 0` they are an error.
pub fn weighted_update(
    q_prev: &QTable,
    dataset: &TransitionDataset,
    source: &TabularMdp,
    source_sa: &SamplingDistribution,
    lambda: f64,
    mode: &OperatorMode,
) -> Result<QTable> {
    check_lambda(lambda)?;
    check_dataset(source, dataset)?;
    mdp::check_inputs(source, q_prev, mode)?;
    weighted_update_from_values(
        &mode.state_values(q_prev),
        dataset,
        source,
        source_sa,
        lambda,
    )
}

pub(crate) fn weighted_update_from_values(
    v: &[f64],
    dataset: &TransitionDataset,
    source: &TabularMdp,
    source_sa: &SamplingDistribution,
    lambda: f64,
) -> Result<QTable> {
    let (ns, na) = (source.num_states(), source.num_actions());
    let src = backup_from_values(source, v);
    let g = source.discount();
    let n = dataset.len() as f64;
    let mut out = QTable::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let count = dataset.count(s, a);
            let w_emp = (1.0 - lambda) * count as f64 / n;
            let w_src = lambda * source_sa.prob(s, a);
            let denom = w_emp + w_src;
            if denom == 0.0 {
                return Err(Error::ZeroDenominator { s, a });
            }
            let value = if w_emp == 0.0 {
                src.get(s, a)
            } else {
                let sum_v: f64 = dataset
                    .successor_counts(s, a)
                    .iter()
                    .zip(v)
                    .map(|(&c, x)| c as f64 * x)
                    .sum();
                let mean = source.reward(s, a) + g * (sum_v / count as f64);
                if w_src == 0.0 {
                    mean
                } else {
                    // exact whenever the two backups agree
                    mean + (w_src / denom) * (src.get(s, a) - mean)
                }
            };
            out.set(s, a, value);
        }
    }
    Ok(out)
}

/// Ternary-search minimizer of the per-cell objective
/// `v ↦ (1−λ)/N Σ_j (v − B̂_j)² + λ P_D'(s,a) Σ_{s'} P'(s'|s,a)(v − B̂_{s'})²`
/// on `[−2B/(1−γ), 2B/(1−γ)]` to width `1e-10`.
///
/// Objective values are compared through their exact difference
/// `f(m1) − f(m2) = Σ w (m1 − m2)(m1 + m2 − 2b)`; comparing two rounded
/// values of `f` directly stalls around `1e-5` because the objective is flat
/// at its minimum.
pub fn brute_force_minimizer(
    q_prev: &QTable,
    dataset: &TransitionDataset,
    source: &TabularMdp,
    source_sa: &SamplingDistribution,
    lambda: f64,
    mode: &OperatorMode,
) -> Result<QTable> {
    check_lambda(lambda)?;
    check_dataset(source, dataset)?;
    mdp::check_inputs(source, q_prev, mode)?;
    let (ns, na) = (source.num_states(), source.num_actions());
    let g = source.discount();
    let n = dataset.len() as f64;

    // targets per cell from the individual triples
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); ns * na];
    for t in dataset.triples() {
        let b = mdp::stochastic_backup(q_prev, source.reward(t.s, t.a), g, t.sp, mode)?;
        samples[t.s * na + t.a].push(b);
    }

    let bracket = 2.0 * source.q_bound();
    let mut out = QTable::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let cell = &samples[s * na + a];
            let w_emp = (1.0 - lambda) / n;
            let w_src = lambda * source_sa.prob(s, a);
            if (w_emp == 0.0 || cell.is_empty()) && w_src == 0.0 {
                return Err(Error::ZeroDenominator { s, a });
            }
            let mut src_terms = Vec::with_capacity(ns);
            for (sp, &p) in source.row(s, a).iter().enumerate() {
                let b = mdp::stochastic_backup(q_prev, source.reward(s, a), g, sp, mode)?;
                src_terms.push((w_src * p, b));
            }
            let diff = |m1: f64, m2: f64| -> f64 {
                let d = m1 - m2;
                let emp: f64 = cell.iter().map(|b| w_emp * d * ((m1 - b) + (m2 - b))).sum();
                let src: f64 = src_terms
                    .iter()
                    .map(|(w, b)| w * d * ((m1 - b) + (m2 - b)))
                    .sum();
                emp + src
            };
            let (mut lo, mut hi) = (-bracket, bracket);
            while hi - lo > 1e-10 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                if diff(m1, m2) < 0.0 {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            out.set(s, a, 0.5 * (lo + hi));
        }
    }
    Ok(out)
}

/// Exact target backup, the infeasible comparator iterate.
pub fn target_update(q_prev: &QTable, target: &TabularMdp, mode: &OperatorMode) -> Result<QTable> {
    mdp::exact_backup(target, q_prev, mode)
}

/// Runs `K` weighted updates from `init_q` and records per-step diagnostics.
pub fn run_fqi(
    pair: &DomainPair,
    dataset: &TransitionDataset,
    config: &SolveConfig,
    q_star: Option<&QTable>,
) -> Result<SolveTrace> {
    config.validate()?;
    let target = &pair.target;
    check_dataset(target, dataset)?;
    let mode = &config.mode;
    let init = config
        .init_q
        .clone()
        .unwrap_or_else(|| QTable::zeros(target.num_states(), target.num_actions()));
    mdp::check_inputs(target, &init, mode)?;

    let mut history = Vec::with_capacity(config.num_iterations + 1);
    let mut diagnostics = Vec::with_capacity(config.num_iterations);
    history.push(init);
    for k in 1..=config.num_iterations {
        let prev = history.last().expect("non-empty");
        let v = mode.state_values(prev);
        let next =
            weighted_update_from_values(&v, dataset, &pair.source, &pair.source_sa, config.lambda)?;
        let emp_td = empirical_td_error(&next, prev, dataset, target, mode)?;
        let exact_td_target = expected_td_error_from_values(&next, &v, target, &pair.target_sa);
        let xi_k = dynamics_gap_xi(prev, target, &pair.source, mode)?;
        let var_term_k = bounds::realized_varsigma_covered(prev, target, dataset.counts(), mode);
        let (dist_expabs, dist_sup) = match q_star {
            Some(star) => (
                Some(next.weighted_abs_distance(star, pair.target_sa.probs())),
                Some(next.sup_distance(star)),
            ),
            None => (None, None),
        };
        diagnostics.push(IterationDiagnostics {
            k,
            emp_td,
            exact_td_target,
            xi_k,
            var_term_k,
            dist_expabs,
            dist_sup,
        });
        history.push(next);
    }
    Ok(SolveTrace {
        q_history: history,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{perturb_dynamics, sample_covering_dataset, sample_dataset, Transition};
    use crate::mdp::{exact_backup, optimal_q, Policy};
    use proptest::prelude::*;

    fn deterministic_mdp(ns: usize, na: usize, seed: u64) -> TabularMdp {
        let base = TabularMdp::random(ns, na, 0.9, 1.0, seed).unwrap();
        let mut t = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for a in 0..na {
                t[(s * na + a) * ns + (s * 7 + a * 3 + 1) % ns] = 1.0;
            }
        }
        base.with_transitions(t).unwrap()
    }

    struct Instance {
        source: TabularMdp,
        source_sa: SamplingDistribution,
        dataset: TransitionDataset,
        q_prev: QTable,
    }

    fn instance(seed: u64, ns: usize, na: usize, n: usize) -> Instance {
        let target = TabularMdp::random(ns, na, 0.9, 1.0, seed).unwrap();
        let source = perturb_dynamics(&target, 0.4, seed + 1).unwrap();
        let source_sa = SamplingDistribution::random(ns, na, seed + 2).unwrap();
        let dataset =
            sample_dataset(&target, &SamplingDistribution::uniform(ns, na), n, seed + 3).unwrap();
        let q_prev = QTable::random(ns, na, target.q_bound(), seed + 4);
        Instance {
            source,
            source_sa,
            dataset,
            q_prev,
        }
    }

    #[test]
    fn empirical_td_zero_when_q_is_exact_backup_on_deterministic_mdp() {
        let m = deterministic_mdp(4, 2, 1);
        let ds = sample_dataset(&m, &SamplingDistribution::uniform(4, 2), 50, 2).unwrap();
        let prev = QTable::random(4, 2, 3.0, 3);
        let q = exact_backup(&m, &prev, &OperatorMode::Optimality).unwrap();
        let e = empirical_td_error(&q, &prev, &ds, &m, &OperatorMode::Optimality).unwrap();
        assert!(e.abs() <= 1e-28);
        let mu = SamplingDistribution::uniform(4, 2);
        let x = expected_td_error(&q, &prev, &m, &mu, &OperatorMode::Optimality).unwrap();
        assert!(x.abs() <= 1e-28);
    }

    #[test]
    fn empirical_td_single_triple() {
        let m = TabularMdp::random(2, 1, 0.5, 1.0, 4).unwrap();
        let prev = QTable::zeros(2, 1);
        let ds =
            TransitionDataset::from_triples(2, 1, vec![Transition { s: 1, a: 0, sp: 0 }], None)
                .unwrap();
        let q = QTable::from_vec(2, 1, vec![0.0, m.reward(1, 0) + 2.0]).unwrap();
        let e = empirical_td_error(&q, &prev, &ds, &m, &OperatorMode::Optimality).unwrap();
        assert!((e - 4.0).abs() <= 1e-12);
    }

    #[test]
    fn empirical_td_matches_loop() {
        let inst = instance(10, 4, 3, 120);
        let m = &inst.source;
        let q = QTable::random(4, 3, 5.0, 11);
        let mode = OperatorMode::Optimality;
        let mut acc = 0.0;
        for t in inst.dataset.triples() {
            let next = (0..3)
                .map(|a| inst.q_prev.get(t.sp, a))
                .fold(f64::MIN, f64::max);
            let d = q.get(t.s, t.a) - m.reward(t.s, t.a) - 0.9 * next;
            acc += d * d;
        }
        acc /= inst.dataset.len() as f64;
        let got = empirical_td_error(&q, &inst.q_prev, &inst.dataset, m, &mode).unwrap();
        assert!((got - acc).abs() <= 1e-12);
    }

    #[test]
    fn expected_td_decomposition() {
        for seed in 0..20 {
            let m = TabularMdp::random(4, 3, 0.9, 1.0, 100 + seed).unwrap();
            let mu = SamplingDistribution::random(4, 3, 200 + seed).unwrap();
            let prev = QTable::random(4, 3, m.q_bound(), 300 + seed);
            let q = QTable::random(4, 3, m.q_bound(), 400 + seed);
            let mode = OperatorMode::Optimality;
            let bq = exact_backup(&m, &prev, &mode).unwrap();
            let lhs = expected_td_error(&q, &prev, &m, &mu, &mode).unwrap()
                - expected_td_error(&bq, &prev, &m, &mu, &mode).unwrap();
            let rhs: f64 = (0..4)
                .flat_map(|s| (0..3).map(move |a| (s, a)))
                .map(|(s, a)| mu.prob(s, a) * (q.get(s, a) - bq.get(s, a)).powi(2))
                .sum();
            assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn expected_td_matches_monte_carlo() {
        let m = TabularMdp::random(3, 2, 0.9, 1.0, 21).unwrap();
        let mu = SamplingDistribution::uniform(3, 2);
        let prev = QTable::random(3, 2, m.q_bound(), 22);
        let q = QTable::random(3, 2, m.q_bound(), 23);
        let mode = OperatorMode::Optimality;
        let exact = expected_td_error(&q, &prev, &m, &mu, &mode).unwrap();
        let ds = sample_dataset(&m, &mu, 100_000, 24).unwrap();
        let v = mode.state_values(&prev);
        let errs: Vec<f64> = ds
            .triples()
            .iter()
            .map(|t| (q.get(t.s, t.a) - m.reward(t.s, t.a) - 0.9 * v[t.sp]).powi(2))
            .collect();
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let emp = empirical_td_error(&q, &prev, &ds, &m, &mode).unwrap();
        assert!((emp - mean).abs() <= 1e-9);
        assert!(
            (emp - exact).abs() <= 3.0 * sd / n.sqrt(),
            "{emp} vs {exact}"
        );
    }

    #[test]
    fn lambda_one_is_source_backup() {
        let inst = instance(30, 5, 3, 40);
        let mode = OperatorMode::Optimality;
        let q = weighted_update(
            &inst.q_prev,
            &inst.dataset,
            &inst.source,
            &inst.source_sa,
            1.0,
            &mode,
        )
        .unwrap();
        assert_eq!(q, exact_backup(&inst.source, &inst.q_prev, &mode).unwrap());
    }

    #[test]
    fn lambda_zero_is_cell_mean() {
        let inst = instance(31, 3, 2, 200);
        crate::data::coverage_check(&inst.dataset).unwrap();
        let mode = OperatorMode::Optimality;
        let q = weighted_update(
            &inst.q_prev,
            &inst.dataset,
            &inst.source,
            &inst.source_sa,
            0.0,
            &mode,
        )
        .unwrap();
        let v = mode.state_values(&inst.q_prev);
        for s in 0..3 {
            for a in 0..2 {
                let b: Vec<f64> = inst
                    .dataset
                    .triples()
                    .iter()
                    .filter(|t| t.s == s && t.a == a)
                    .map(|t| inst.source.reward(s, a) + 0.9 * v[t.sp])
                    .collect();
                let mean = b.iter().sum::<f64>() / b.len() as f64;
                assert!((q.get(s, a) - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn lambda_zero_uncovered_cell_is_an_error() {
        let m = TabularMdp::random(2, 2, 0.9, 1.0, 1).unwrap();
        let ds = TransitionDataset::from_triples(
            2,
            2,
            vec![
                Transition { s: 0, a: 0, sp: 1 },
                Transition { s: 1, a: 1, sp: 0 },
            ],
            None,
        )
        .unwrap();
        let mu = SamplingDistribution::uniform(2, 2);
        let prev = QTable::zeros(2, 2);
        let mode = OperatorMode::Optimality;
        assert!(matches!(
            weighted_update(&prev, &ds, &m, &mu, 0.0, &mode),
            Err(Error::ZeroDenominator { s: 0, a: 1 })
        ));
        assert!(matches!(
            brute_force_minimizer(&prev, &ds, &m, &mu, 0.0, &mode),
            Err(Error::ZeroDenominator { s: 0, a: 1 })
        ));
        // with λ > 0 the uncovered cell takes the source backup
        let q = weighted_update(&prev, &ds, &m, &mu, 0.3, &mode).unwrap();
        let src = exact_backup(&m, &prev, &mode).unwrap();
        assert_eq!(q.get(0, 1), src.get(0, 1));
        assert!(weighted_update(&prev, &ds, &m, &mu, 1.2, &mode).is_err());
    }

    #[test]
    fn closed_form_matches_oracle_at_lambda_point_six() {
        let inst = instance(40, 5, 3, 300);
        let mode = OperatorMode::Optimality;
        let a = weighted_update(
            &inst.q_prev,
            &inst.dataset,
            &inst.source,
            &inst.source_sa,
            0.6,
            &mode,
        )
        .unwrap();
        let b = brute_force_minimizer(
            &inst.q_prev,
            &inst.dataset,
            &inst.source,
            &inst.source_sa,
            0.6,
            &mode,
        )
        .unwrap();
        assert!(a.sup_distance(&b) <= 1e-8, "{}", a.sup_distance(&b));
    }

    #[test]
    fn oracle_boundary_cases() {
        // λ = 1 with deterministic source: the source backup
        let m = deterministic_mdp(3, 2, 50);
        let ds = sample_dataset(&m, &SamplingDistribution::uniform(3, 2), 10, 51).unwrap();
        let prev = QTable::random(3, 2, m.q_bound(), 52);
        let mu = SamplingDistribution::uniform(3, 2);
        let mode = OperatorMode::Optimality;
        let got = brute_force_minimizer(&prev, &ds, &m, &mu, 1.0, &mode).unwrap();
        let want = exact_backup(&m, &prev, &mode).unwrap();
        assert!(got.sup_distance(&want) <= 1e-9);

        // samples {0, 2} at λ = 0: the mean, 1
        let one = TabularMdp::new(
            2,
            1,
            0.5,
            5.0,
            vec![0.5, 0.5, 0.5, 0.5],
            vec![0.0, 0.0],
            vec![0.5, 0.5],
        )
        .unwrap();
        let prev = QTable::from_vec(2, 1, vec![0.0, 4.0]).unwrap();
        let ds = TransitionDataset::from_triples(
            2,
            1,
            vec![
                Transition { s: 0, a: 0, sp: 0 },
                Transition { s: 0, a: 0, sp: 1 },
                Transition { s: 1, a: 0, sp: 0 },
            ],
            None,
        )
        .unwrap();
        let mu = SamplingDistribution::uniform(2, 1);
        let got = brute_force_minimizer(&prev, &ds, &one, &mu, 0.0, &mode).unwrap();
        assert!((got.get(0, 0) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn policy_evaluation_mode_oracle() {
        let inst = instance(60, 4, 3, 200);
        let pi = Policy::uniform(4, 3);
        let mode = OperatorMode::PolicyEvaluation(pi);
        for lambda in [0.2, 0.5, 0.8] {
            let a = weighted_update(
                &inst.q_prev,
                &inst.dataset,
                &inst.source,
                &inst.source_sa,
                lambda,
                &mode,
            )
            .unwrap();
            let b = brute_force_minimizer(
                &inst.q_prev,
                &inst.dataset,
                &inst.source,
                &inst.source_sa,
                lambda,
                &mode,
            )
            .unwrap();
            assert!(a.sup_distance(&b) <= 1e-8);
        }
    }

    #[test]
    fn target_update_cases() {
        let m = TabularMdp::random(4, 3, 0.9, 1.0, 70).unwrap();
        let prev = QTable::random(4, 3, 5.0, 71);
        let mode = OperatorMode::Optimality;
        assert_eq!(
            target_update(&prev, &m, &mode).unwrap(),
            exact_backup(&m, &prev, &mode).unwrap()
        );
        let z = m.with_discount(0.0).unwrap();
        assert_eq!(
            target_update(&prev, &z, &mode).unwrap().values(),
            z.rewards()
        );
        let tol = 1e-10;
        let star = optimal_q(&m, tol, 1_000_000).unwrap();
        assert!(target_update(&star, &m, &mode).unwrap().sup_distance(&star) <= tol);
    }

    #[test]
    fn run_fqi_lambda_one_same_domain_reaches_q_star() {
        let m = TabularMdp::random(4, 3, 0.9, 1.0, 80).unwrap();
        let pair = DomainPair::uniform(m.clone(), m.clone()).unwrap();
        let ds = sample_dataset(&m, &pair.target_sa, 30, 81).unwrap();
        let tol = 1e-10;
        let star = optimal_q(&m, tol, 1_000_000).unwrap();
        let trace = run_fqi(&pair, &ds, &SolveConfig::new(1.0, 400), Some(&star)).unwrap();
        assert_eq!(trace.q_history.len(), 401);
        assert_eq!(trace.diagnostics.len(), 400);
        assert!(trace.final_q().sup_distance(&star) <= tol);
        assert!(trace.diagnostics.iter().all(|d| d.xi_k == 0.0));
    }

    #[test]
    fn run_fqi_lambda_zero_deterministic_is_value_iteration() {
        let m = deterministic_mdp(4, 2, 90);
        let pair = DomainPair::uniform(m.clone(), perturb_dynamics(&m, 0.5, 91).unwrap()).unwrap();
        let ds = sample_covering_dataset(&m, &pair.target_sa, 60, 92, 1000).unwrap();
        let trace = run_fqi(&pair, &ds, &SolveConfig::new(0.0, 25), None).unwrap();
        let mut q = QTable::zeros(4, 2);
        for k in 1..=25 {
            q = exact_backup(&m, &q, &OperatorMode::Optimality).unwrap();
            assert!(trace.q_history[k].sup_distance(&q) <= 1e-12);
        }
    }

    #[test]
    fn run_fqi_identical_domains_deterministic_traces_agree_across_lambda() {
        let m = deterministic_mdp(5, 2, 93);
        let pair = DomainPair::uniform(m.clone(), perturb_dynamics(&m, 0.0, 94).unwrap()).unwrap();
        let ds = sample_covering_dataset(&m, &pair.target_sa, 80, 95, 1000).unwrap();
        let reference = run_fqi(&pair, &ds, &SolveConfig::new(0.0, 20), None).unwrap();
        for lambda in [0.2, 0.4, 0.5, 0.6, 0.8, 1.0] {
            let t = run_fqi(&pair, &ds, &SolveConfig::new(lambda, 20), None).unwrap();
            for (a, b) in t.q_history.iter().zip(&reference.q_history) {
                assert!(a.sup_distance(b) <= 1e-12);
            }
        }
    }

    #[test]
    fn run_fqi_rejects_bad_config() {
        let m = TabularMdp::random(2, 2, 0.9, 1.0, 1).unwrap();
        let pair = DomainPair::uniform(m.clone(), m.clone()).unwrap();
        let ds = sample_dataset(&m, &pair.target_sa, 10, 2).unwrap();
        assert!(run_fqi(&pair, &ds, &SolveConfig::new(0.5, 0), None).is_err());
        assert!(run_fqi(&pair, &ds, &SolveConfig::new(-0.5, 3), None).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let m = TabularMdp::random(3, 2, 0.9, 1.0, 5).unwrap();
        let pair = DomainPair::uniform(m.clone(), perturb_dynamics(&m, 0.2, 6).unwrap()).unwrap();
        let ds = sample_dataset(&m, &pair.target_sa, 50, 7).unwrap();
        let trace = run_fqi(&pair, &ds, &SolveConfig::new(0.5, 3), None).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SolveTrace::CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,") && lines[3].ends_with(",,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn update_interpolates_between_boundaries(seed in 0u64..10_000, lambda in 0.0f64..=1.0) {
            let inst = instance(seed * 7, 3, 2, 60);
            prop_assume!(crate::data::coverage_check(&inst.dataset).is_ok());
            let mode = OperatorMode::Optimality;
            let run = |l| weighted_update(&inst.q_prev, &inst.dataset, &inst.source, &inst.source_sa, l, &mode).unwrap();
            let (q0, q1, ql) = (run(0.0), run(1.0), run(lambda));
            for i in 0..6 {
                let (lo, hi) = {
                    let (x, y) = (q0.values()[i], q1.values()[i]);
                    (x.min(y), x.max(y))
                };
                let v = ql.values()[i];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn update_preserves_value_bound(seed in 0u64..10_000, lambda in 0.0f64..=1.0) {
            let inst = instance(seed * 11 + 1, 4, 2, 40);
            let mode = OperatorMode::Optimality;
            prop_assume!(lambda > 0.0 || crate::data::coverage_check(&inst.dataset).is_ok());
            let q = weighted_update(&inst.q_prev, &inst.dataset, &inst.source, &inst.source_sa, lambda, &mode).unwrap();
            prop_assert!(q.max_abs() <= inst.source.q_bound() * (1.0 + 1e-12));
        }
    }
}
