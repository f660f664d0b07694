//! Dynamics gap, normalized variance, and the performance and convergence
//! bounds for the λ-weighted update.

use serde::{Deserialize, Serialize};

use crate::data::{DomainPair, TransitionDataset};
use crate::error::{Error, Result};
use crate::mdp::{self, backup_from_values, OperatorMode, QTable, TabularMdp};
use crate::solver::{check_lambda, SolveTrace};

/// `ξ = max_{s,a} ((B_D Q)(s,a) − (B_D' Q)(s,a))²`.
pub fn dynamics_gap_xi(
    q: &QTable,
    target: &TabularMdp,
    source: &TabularMdp,
    mode: &OperatorMode,
) -> Result<f64> {
    mdp::check_inputs(target, q, mode)?;
    mdp::check_inputs(source, q, mode)?;
    let v = mode.state_values(q);
    Ok(gap_from_values(target, source, &v))
}

pub(crate) fn gap_from_values(target: &TabularMdp, source: &TabularMdp, v: &[f64]) -> f64 {
    let bt = backup_from_values(target, v);
    let bs = backup_from_values(source, v);
    bt.values()
        .iter()
        .zip(bs.values())
        .fold(0.0, |m, (x, y)| m.max((x - y) * (x - y)))
}

/// Variance of `B̂_{s'} Q(s,a)` under `s' ~ P[s][a][·]`, i.e. `γ²·Var[V(s')]`.
pub fn variance_of_backup(
    q: &QTable,
    target: &TabularMdp,
    s: usize,
    a: usize,
    mode: &OperatorMode,
) -> Result<f64> {
    mdp::check_inputs(target, q, mode)?;
    if s >= target.num_states() || a >= target.num_actions() {
        return Err(Error::Shape(format!("cell ({s}, {a}) out of range")));
    }
    Ok(variance_from_values(target, s, a, &mode.state_values(q)))
}

fn variance_from_values(target: &TabularMdp, s: usize, a: usize, v: &[f64]) -> f64 {
    let row = target.row(s, a);
    let mean: f64 = row.iter().zip(v).map(|(p, x)| p * x).sum();
    let var: f64 = row
        .iter()
        .zip(v)
        .map(|(p, x)| p * (x - mean) * (x - mean))
        .sum();
    let g = target.discount();
    g * g * var
}

/// How `N(s, a)` enters the normalized variance.
#[derive(Debug, Clone, Copy)]
pub enum CountsPolicy<'a> {
    /// `N(s, a) = 1` everywhere: the maximum over all datasets.
    WorstCase,
    /// Counts of a concrete dataset.
    Realized(&'a [usize]),
}

/// `ς = max_{s,a} Var[B̂ Q(s,a)] / N(s,a)`.
pub fn varsigma(
    q: &QTable,
    target: &TabularMdp,
    counts: CountsPolicy<'_>,
    mode: &OperatorMode,
) -> Result<f64> {
    mdp::check_inputs(target, q, mode)?;
    let v = mode.state_values(q);
    let na = target.num_actions();
    let mut best: f64 = 0.0;
    for s in 0..target.num_states() {
        for a in 0..na {
            let n = match counts {
                CountsPolicy::WorstCase => 1,
                CountsPolicy::Realized(c) => {
                    if c.len() != target.num_cells() {
                        return Err(Error::Shape("counts table size differs from MDP".into()));
                    }
                    match c[s * na + a] {
                        0 => return Err(Error::Uncovered(vec![(s, a)])),
                        n => n,
                    }
                }
            };
            best = best.max(variance_from_values(target, s, a, &v) / n as f64);
        }
    }
    Ok(best)
}

/// Realized `ς` restricted to covered cells; 0 when nothing is covered.
pub(crate) fn realized_varsigma_covered(
    q: &QTable,
    target: &TabularMdp,
    counts: &[usize],
    mode: &OperatorMode,
) -> f64 {
    let v = mode.state_values(q);
    let na = target.num_actions();
    let mut best: f64 = 0.0;
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            best = best.max(variance_from_values(target, c / na, c % na, &v) / n as f64);
        }
    }
    best
}

/// Inputs to the expected and worst-case performance bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub lambda: f64,
    pub varsigma: f64,
    pub xi: f64,
    pub beta_l: f64,
    pub beta_u: f64,
    pub reward_bound: f64,
    pub gamma: f64,
    pub num_states: usize,
    pub num_actions: usize,
    pub n: usize,
    pub delta: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        let checks: [(&'static str, f64, bool, &'static str); 6] = [
            ("varsigma", self.varsigma, self.varsigma >= 0.0, "[0, inf)"),
            ("xi", self.xi, self.xi >= 0.0, "[0, inf)"),
            ("beta_l", self.beta_l, self.beta_l > 0.0, "(0, inf)"),
            (
                "beta_u",
                self.beta_u,
                self.beta_u >= self.beta_l,
                "[beta_l, inf)",
            ),
            (
                "gamma",
                self.gamma,
                (0.0..1.0).contains(&self.gamma),
                "[0, 1)",
            ),
            (
                "delta",
                self.delta,
                self.delta > 0.0 && self.delta < 1.0,
                "(0, 1)",
            ),
        ];
        for (name, value, ok, range) in checks {
            if !ok {
                return Err(Error::OutOfRange { name, value, range });
            }
        }
        if self.n == 0 {
            return Err(Error::OutOfRange {
                name: "n",
                value: 0.0,
                range: "[1, inf)",
            });
        }
        Ok(())
    }
}

/// `(1−λ) / (1−λ + λ/β_u)`, the weight on the sampling-noise term.
pub fn variance_weight(lambda: f64, beta_u: f64) -> f64 {
    (1.0 - lambda) / (1.0 - lambda + lambda / beta_u)
}

/// `λ / ((1−λ)β_l + λ)`, the weight on the dynamics-gap term.
pub fn gap_weight(lambda: f64, beta_l: f64) -> f64 {
    lambda / ((1.0 - lambda) * beta_l + lambda)
}

/// Bound on the expected excess target TD error of one weighted update.
pub fn expected_bound_rhs(inp: &BoundInputs) -> f64 {
    let a = variance_weight(inp.lambda, inp.beta_u);
    let b = gap_weight(inp.lambda, inp.beta_l);
    a * a * inp.varsigma + b * b * inp.xi
}

/// The concentration term added by the high-probability bound.
pub fn concentration_term(inp: &BoundInputs) -> f64 {
    let (l, g, b) = (inp.lambda, inp.gamma, inp.reward_bound);
    let scale = (0.5 * (1.0 / inp.delta).ln()).sqrt() * (inp.num_states * inp.num_actions) as f64
        / (inp.n as f64).sqrt();
    let denom = (1.0 - l) * inp.beta_l * inp.beta_l + l * inp.beta_l;
    let variance_part =
        8.0 * g * b * b / ((1.0 - g) * (1.0 - g)) * inp.beta_u * (1.0 - l) * (1.0 - l) / denom;
    let gap_part = 4.0 * g * b / (1.0 - g) * l * (1.0 - l) * inp.xi.sqrt() / denom;
    scale * (variance_part + gap_part)
}

/// High-probability (`1 − δ`) bound on the realized excess TD error.
pub fn worst_case_bound_rhs(inp: &BoundInputs) -> f64 {
    expected_bound_rhs(inp) + concentration_term(inp)
}

/// `β²ς / (β²ς + βξ)`, the minimizer of the expected bound when `β_l = β_u = β`.
pub fn optimal_lambda_closed(beta: f64, varsigma: f64, xi: f64) -> Result<f64> {
    let num = beta * beta * varsigma;
    let den = num + beta * xi;
    if !(den > 0.0) {
        return Err(Error::UndefinedOptimalWeight);
    }
    Ok(num / den)
}

const GRID_POINTS: usize = 1001;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Minimizer of [`expected_bound_rhs`] over `λ ∈ [0, 1]`: a 1001-point grid
/// scan, then golden-section search on the bracket around the best grid
/// point.
pub fn optimal_lambda_numeric(inp: &BoundInputs, tol: f64) -> f64 {
    let f = |l: f64| expected_bound_rhs(&BoundInputs { lambda: l, ..*inp });
    let step = 1.0 / (GRID_POINTS - 1) as f64;
    let mut best_i = 0;
    let mut best_v = f(0.0);
    for i in 1..GRID_POINTS {
        let v = f(i as f64 * step);
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let mut lo = best_i.saturating_sub(1) as f64 * step;
    let mut hi = ((best_i + 1).min(GRID_POINTS - 1)) as f64 * step;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    // candidates: the golden-section midpoint and the bracket ends, so that a
    // boundary minimizer is returned exactly
    let mid = 0.5 * (lo + hi);
    [lo, hi, mid]
        .into_iter()
        .chain([best_i as f64 * step])
        .map(|l| (f(l), l))
        .fold(
            (f64::INFINITY, mid),
            |acc, (v, l)| if v < acc.0 { (v, l) } else { acc },
        )
        .1
}

/// Inputs to the convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceInputs {
    pub lambda: f64,
    pub beta_l: f64,
    pub beta_u: f64,
    pub gamma: f64,
    pub sigma_max: f64,
    pub xi_max: f64,
    pub k: u64,
    /// Distance of the initial table to `Q*`.
    pub init_dist_term: f64,
}

fn per_step_error(lambda: f64, beta_l: f64, beta_u: f64, sigma_max: f64, xi_max: f64) -> f64 {
    variance_weight(lambda, beta_u) * sigma_max + gap_weight(lambda, beta_l) * xi_max.sqrt()
}

/// `γ^{k+1} d₀ + (1 − γ^{k+1})/(1 − γ) · (a σ_max + b √ξ_max)`.
pub fn convergence_bound_rhs(inp: &ConvergenceInputs) -> f64 {
    let decay = inp.gamma.powf(inp.k as f64 + 1.0);
    decay * inp.init_dist_term
        + (1.0 - decay) / (1.0 - inp.gamma)
            * per_step_error(
                inp.lambda,
                inp.beta_l,
                inp.beta_u,
                inp.sigma_max,
                inp.xi_max,
            )
}

/// Radius of the neighborhood of `Q*` reached as `k → ∞`.
pub fn neighborhood_c(
    lambda: f64,
    beta_l: f64,
    beta_u: f64,
    gamma: f64,
    sigma_max: f64,
    xi_max: f64,
) -> f64 {
    per_step_error(lambda, beta_l, beta_u, sigma_max, xi_max) / (1.0 - gamma)
}

/// Lower estimates of `ξ_max` and `σ_max` from a finite trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMaxima {
    pub xi_max_est: f64,
    pub sigma_max_est: f64,
}

/// Scans every iterate of `trace`: `ξ` of each iterate, and the largest
/// deviation of a covered cell's empirical mean backup from the exact target
/// backup.
pub fn trace_maxima(
    trace: &SolveTrace,
    pair: &DomainPair,
    dataset: &TransitionDataset,
    mode: &OperatorMode,
) -> Result<TraceMaxima> {
    if trace.q_history.is_empty() {
        return Err(Error::Shape("empty trace".into()));
    }
    let mut out = TraceMaxima {
        xi_max_est: 0.0,
        sigma_max_est: 0.0,
    };
    for q in &trace.q_history {
        mdp::check_inputs(&pair.target, q, mode)?;
        let v = mode.state_values(q);
        out.xi_max_est = out
            .xi_max_est
            .max(gap_from_values(&pair.target, &pair.source, &v));
        out.sigma_max_est = out
            .sigma_max_est
            .max(sample_mean_deviation(&pair.target, dataset, &v));
    }
    Ok(out)
}

/// `max_{covered (s,a)} |mean_j B̂_{s'_j} Q(s,a) − (B_D Q)(s,a)|`.
pub(crate) fn sample_mean_deviation(
    target: &TabularMdp,
    dataset: &TransitionDataset,
    v: &[f64],
) -> f64 {
    let g = target.discount();
    let mut best: f64 = 0.0;
    for s in 0..target.num_states() {
        for a in 0..target.num_actions() {
            let n = dataset.count(s, a);
            if n == 0 {
                continue;
            }
            let emp: f64 = dataset
                .successor_counts(s, a)
                .iter()
                .zip(v)
                .map(|(&c, x)| c as f64 * x)
                .sum::<f64>()
                / n as f64;
            let exact: f64 = target.row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
            best = best.max(g * (emp - exact).abs());
        }
    }
    best
}

/// Interval `[lo, hi]` containing every entry of every table reachable from
/// `init` by backups and convex combinations of backups in domains that share
/// `target`'s rewards and discount.
pub fn value_envelope(target: &TabularMdp, init: &QTable) -> (f64, f64) {
    let g = target.discount();
    let r_min = target
        .rewards()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let r_max = target
        .rewards()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let q_min = init.values().iter().copied().fold(f64::INFINITY, f64::min);
    let q_max = init
        .values()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (q_min.min(r_min / (1.0 - g)), q_max.max(r_max / (1.0 - g)))
}

/// Analytic upper bound on `σ_max`: `γ (hi − lo)` over the value envelope,
/// or 0 when every target row is deterministic. Never below the supremum.
pub fn analytic_sigma_max(target: &TabularMdp, init: &QTable) -> f64 {
    let any_stochastic = (0..target.num_states())
        .any(|s| (0..target.num_actions()).any(|a| target.is_stochastic_row(s, a)));
    if !any_stochastic {
        return 0.0;
    }
    let (lo, hi) = value_envelope(target, init);
    target.discount() * (hi - lo)
}

/// Analytic upper bound on `ξ_max`: `(γ · max TV(P, P') · (hi − lo))²`.
pub fn analytic_xi_max(pair: &DomainPair, init: &QTable) -> f64 {
    let (t, s) = (&pair.target, &pair.source);
    let mut tv: f64 = 0.0;
    for st in 0..t.num_states() {
        for a in 0..t.num_actions() {
            let d: f64 = t
                .row(st, a)
                .iter()
                .zip(s.row(st, a))
                .map(|(p, q)| (p - q).abs())
                .sum();
            tv = tv.max(0.5 * d);
        }
    }
    let (lo, hi) = value_envelope(t, init);
    let x = t.discount() * tv * (hi - lo);
    x * x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{perturb_dynamics, sample_dataset, SamplingDistribution};
    use crate::solver::{run_fqi, SolveConfig};
    use proptest::prelude::*;

    fn inputs(lambda: f64, varsigma: f64, xi: f64, beta_l: f64, beta_u: f64) -> BoundInputs {
        BoundInputs {
            lambda,
            varsigma,
            xi,
            beta_l,
            beta_u,
            reward_bound: 1.0,
            gamma: 0.9,
            num_states: 5,
            num_actions: 3,
            n: 100,
            delta: 0.1,
        }
    }

    #[test]
    fn gap_cases() {
        let m = TabularMdp::random(4, 3, 0.9, 1.0, 1).unwrap();
        let q = QTable::random(4, 3, 5.0, 2);
        let mode = OperatorMode::Optimality;
        assert_eq!(dynamics_gap_xi(&q, &m, &m, &mode).unwrap(), 0.0);
        let src = perturb_dynamics(&m, 0.7, 3).unwrap();
        let m0 = m.with_discount(0.0).unwrap();
        let s0 = src.with_discount(0.0).unwrap();
        assert_eq!(dynamics_gap_xi(&q, &m0, &s0, &mode).unwrap(), 0.0);

        // double-backup scan oracle
        let v: Vec<f64> = (0..4)
            .map(|s| q.row(s).iter().copied().fold(f64::MIN, f64::max))
            .collect();
        let mut best: f64 = 0.0;
        for s in 0..4 {
            for a in 0..3 {
                let bt = m.reward(s, a) + 0.9 * (0..4).map(|t| m.row(s, a)[t] * v[t]).sum::<f64>();
                let bs =
                    src.reward(s, a) + 0.9 * (0..4).map(|t| src.row(s, a)[t] * v[t]).sum::<f64>();
                best = best.max((bt - bs).powi(2));
            }
        }
        assert!((dynamics_gap_xi(&q, &m, &src, &mode).unwrap() - best).abs() <= 1e-12);
    }

    #[test]
    fn variance_cases() {
        let mode = OperatorMode::Optimality;
        // deterministic row
        let det = TabularMdp::new(
            2,
            1,
            0.9,
            1.0,
            vec![0.0, 1.0, 1.0, 0.0],
            vec![0.1, 0.2],
            vec![0.5, 0.5],
        )
        .unwrap();
        let q = QTable::from_vec(2, 1, vec![3.0, -1.0]).unwrap();
        assert_eq!(variance_of_backup(&q, &det, 0, 0, &mode).unwrap(), 0.0);

        // Bernoulli successors with values 0 and 1
        let coin = TabularMdp::new(
            2,
            1,
            0.9,
            1.0,
            vec![0.5, 0.5, 0.5, 0.5],
            vec![0.3, 0.0],
            vec![0.5, 0.5],
        )
        .unwrap();
        let q = QTable::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let v = variance_of_backup(&q, &coin, 0, 0, &mode).unwrap();
        assert!((v - 0.2025).abs() <= 1e-15);

        // two-pass raw-moment oracle on random rows
        let m = TabularMdp::random(5, 2, 0.9, 1.0, 4).unwrap();
        let q = QTable::random(5, 2, m.q_bound(), 5);
        let vals = mode.state_values(&q);
        for s in 0..5 {
            for a in 0..2 {
                let b: Vec<f64> = vals.iter().map(|x| m.reward(s, a) + 0.9 * x).collect();
                let p = m.row(s, a);
                let m1: f64 = p.iter().zip(&b).map(|(p, x)| p * x).sum();
                let m2: f64 = p.iter().zip(&b).map(|(p, x)| p * x * x).sum();
                let got = variance_of_backup(&q, &m, s, a, &mode).unwrap();
                assert!((got - (m2 - m1 * m1)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn varsigma_cases() {
        let mode = OperatorMode::Optimality;
        let det = TabularMdp::new(
            2,
            1,
            0.9,
            1.0,
            vec![0.0, 1.0, 1.0, 0.0],
            vec![0.1, 0.2],
            vec![0.5, 0.5],
        )
        .unwrap();
        let q = QTable::random(2, 1, 5.0, 6);
        assert_eq!(
            varsigma(&q, &det, CountsPolicy::WorstCase, &mode).unwrap(),
            0.0
        );
        assert_eq!(
            varsigma(&q, &det, CountsPolicy::Realized(&[3, 1]), &mode).unwrap(),
            0.0
        );

        let m = TabularMdp::random(4, 3, 0.9, 1.0, 7).unwrap();
        let q = QTable::random(4, 3, m.q_bound(), 8);
        let worst = varsigma(&q, &m, CountsPolicy::WorstCase, &mode).unwrap();
        let mut scan: f64 = 0.0;
        for s in 0..4 {
            for a in 0..3 {
                scan = scan.max(variance_of_backup(&q, &m, s, a, &mode).unwrap());
            }
        }
        assert!((worst - scan).abs() <= 1e-12);
        let fours = vec![4; 12];
        let realized = varsigma(&q, &m, CountsPolicy::Realized(&fours), &mode).unwrap();
        assert!((realized - worst / 4.0).abs() <= 1e-15);
        let mut holes = fours.clone();
        holes[5] = 0;
        assert!(varsigma(&q, &m, CountsPolicy::Realized(&holes), &mode).is_err());
    }

    #[test]
    fn expected_bound_endpoints() {
        let b = inputs(0.0, 0.7, 0.3, 0.5, 2.0);
        assert_eq!(expected_bound_rhs(&b), 0.7);
        assert_eq!(expected_bound_rhs(&BoundInputs { lambda: 1.0, ..b }), 0.3);
        let even = inputs(0.5, 1.0, 1.0, 1.0, 1.0);
        assert!((expected_bound_rhs(&even) - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn closed_form_cases() {
        assert_eq!(optimal_lambda_closed(1.5, 0.0, 2.0).unwrap(), 0.0);
        assert_eq!(optimal_lambda_closed(1.5, 2.0, 0.0).unwrap(), 1.0);
        assert!((optimal_lambda_closed(2.0, 3.0, 1.0).unwrap() - 6.0 / 7.0).abs() <= 1e-15);
        assert!(matches!(
            optimal_lambda_closed(2.0, 0.0, 0.0),
            Err(Error::UndefinedOptimalWeight)
        ));
    }

    #[test]
    fn numeric_optimum_cases() {
        let tol = 1e-6;
        assert!(optimal_lambda_numeric(&inputs(0.3, 0.0, 0.5, 0.6, 1.7), tol).abs() <= tol);
        assert!((optimal_lambda_numeric(&inputs(0.3, 0.5, 0.0, 0.6, 1.7), tol) - 1.0).abs() <= tol);
        for (beta, vs, xi) in [(2.0, 3.0, 1.0), (0.5, 0.1, 4.0), (1.0, 1.0, 1.0)] {
            let closed = optimal_lambda_closed(beta, vs, xi).unwrap();
            let num = optimal_lambda_numeric(&inputs(0.0, vs, xi, beta, beta), tol);
            assert!((closed - num).abs() <= tol, "{closed} vs {num}");
        }
    }

    #[test]
    fn worst_case_cases() {
        let b = inputs(1.0, 0.4, 0.2, 0.8, 1.3);
        assert!((worst_case_bound_rhs(&b) - 0.2).abs() <= 1e-15);
        let z = BoundInputs {
            gamma: 0.0,
            lambda: 0.4,
            ..b
        };
        assert_eq!(worst_case_bound_rhs(&z), expected_bound_rhs(&z));
        let base = BoundInputs {
            lambda: 0.4,
            n: 250,
            ..b
        };
        let quad = BoundInputs { n: 1000, ..base };
        let ratio = concentration_term(&base) / concentration_term(&quad);
        assert!((ratio - 2.0).abs() <= 1e-12);
        let third = worst_case_bound_rhs(&base) - expected_bound_rhs(&base);
        assert!((third - concentration_term(&base)).abs() <= 1e-12 * third);
    }

    #[test]
    fn convergence_cases() {
        let c = ConvergenceInputs {
            lambda: 0.4,
            beta_l: 0.7,
            beta_u: 1.6,
            gamma: 0.9,
            sigma_max: 0.3,
            xi_max: 0.05,
            k: 1_000_000,
            init_dist_term: 4.0,
        };
        let limit = neighborhood_c(0.4, 0.7, 1.6, 0.9, 0.3, 0.05);
        assert!((convergence_bound_rhs(&c) - limit).abs() <= 1e-12);

        let pure = ConvergenceInputs {
            lambda: 1.0,
            xi_max: 0.0,
            k: 7,
            ..c
        };
        assert!((convergence_bound_rhs(&pure) - 0.9f64.powi(8) * 4.0).abs() <= 1e-15);
        let quiet = ConvergenceInputs {
            sigma_max: 0.0,
            xi_max: 0.0,
            k: 7,
            ..c
        };
        assert!((convergence_bound_rhs(&quiet) - 0.9f64.powi(8) * 4.0).abs() <= 1e-15);

        assert!((neighborhood_c(0.0, 0.7, 1.6, 0.9, 0.3, 0.05) - 3.0).abs() <= 1e-12);
        assert!((neighborhood_c(1.0, 0.7, 1.6, 0.9, 0.3, 0.04) - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn input_validation() {
        assert!(inputs(0.5, 1.0, 1.0, 1.0, 2.0).validate().is_ok());
        assert!(inputs(0.5, 1.0, 1.0, 2.0, 1.0).validate().is_err());
        assert!(inputs(1.5, 1.0, 1.0, 1.0, 2.0).validate().is_err());
        assert!(inputs(0.5, -1.0, 1.0, 1.0, 2.0).validate().is_err());
        assert!(BoundInputs {
            delta: 1.0,
            ..inputs(0.5, 1.0, 1.0, 1.0, 2.0)
        }
        .validate()
        .is_err());
    }

    fn traced_pair(eps: f64, seed: u64) -> (DomainPair, TransitionDataset, SolveTrace) {
        let m = TabularMdp::random(4, 2, 0.9, 1.0, seed).unwrap();
        let pair =
            DomainPair::uniform(m.clone(), perturb_dynamics(&m, eps, seed + 1).unwrap()).unwrap();
        let ds = sample_dataset(&m, &SamplingDistribution::uniform(4, 2), 80, seed + 2).unwrap();
        let trace = run_fqi(&pair, &ds, &SolveConfig::new(0.5, 15), None).unwrap();
        (pair, ds, trace)
    }

    #[test]
    fn trace_maxima_cases() {
        let mode = OperatorMode::Optimality;
        let (pair, ds, trace) = traced_pair(0.0, 10);
        assert_eq!(
            trace_maxima(&trace, &pair, &ds, &mode).unwrap().xi_max_est,
            0.0
        );

        // deterministic target with full coverage: empirical means are exact
        let base = TabularMdp::random(3, 2, 0.9, 1.0, 20).unwrap();
        let mut t = vec![0.0; 18];
        for c in 0..6 {
            t[c * 3 + c % 3] = 1.0;
        }
        let det = base.with_transitions(t).unwrap();
        let pair_det =
            DomainPair::uniform(det.clone(), perturb_dynamics(&det, 0.5, 21).unwrap()).unwrap();
        let ds_det =
            crate::data::sample_covering_dataset(&det, &pair_det.target_sa, 60, 22, 100).unwrap();
        let tr = run_fqi(&pair_det, &ds_det, &SolveConfig::new(0.5, 10), None).unwrap();
        assert!(
            trace_maxima(&tr, &pair_det, &ds_det, &mode)
                .unwrap()
                .sigma_max_est
                <= 1e-12
        );

        // brute-force scan over iterates
        let (pair, ds, trace) = traced_pair(0.4, 30);
        let got = trace_maxima(&trace, &pair, &ds, &mode).unwrap();
        let mut xi: f64 = 0.0;
        let mut sigma: f64 = 0.0;
        for q in &trace.q_history {
            xi = xi.max(dynamics_gap_xi(q, &pair.target, &pair.source, &mode).unwrap());
            let v = mode.state_values(q);
            for s in 0..4 {
                for a in 0..2 {
                    let b: Vec<f64> = ds
                        .triples()
                        .iter()
                        .filter(|t| t.s == s && t.a == a)
                        .map(|t| pair.target.reward(s, a) + 0.9 * v[t.sp])
                        .collect();
                    if b.is_empty() {
                        continue;
                    }
                    let mean = b.iter().sum::<f64>() / b.len() as f64;
                    let exact = crate::mdp::exact_backup(&pair.target, q, &mode)
                        .unwrap()
                        .get(s, a);
                    sigma = sigma.max((mean - exact).abs());
                }
            }
        }
        assert!((got.xi_max_est - xi).abs() <= 1e-12);
        assert!((got.sigma_max_est - sigma).abs() <= 1e-12);

        // analytic envelopes dominate the trace estimates
        let init = QTable::zeros(4, 2);
        assert!(analytic_sigma_max(&pair.target, &init) >= got.sigma_max_est);
        assert!(analytic_xi_max(&pair, &init) >= got.xi_max_est);
    }

    fn positive() -> impl Strategy<Value = f64> {
        1e-3f64..10.0
    }

    proptest! {
        #[test]
        fn expected_bound_is_continuous_and_pinned(vs in positive(), xi in positive(), bl in 0.2f64..1.0, du in 0.0f64..3.0) {
            let b = inputs(0.0, vs, xi, bl, bl + du);
            prop_assert_eq!(expected_bound_rhs(&b), vs);
            let at_one = expected_bound_rhs(&BoundInputs { lambda: 1.0, ..b });
            prop_assert!((at_one - xi).abs() <= 1e-15 * xi);
            let near = expected_bound_rhs(&BoundInputs { lambda: 1e-9, ..b });
            prop_assert!((near - vs).abs() <= 1e-6 * (vs + xi));
        }

        #[test]
        fn numeric_optimum_beats_grid(vs in 0.0f64..10.0, xi in 0.0f64..10.0, bl in 0.2f64..1.0, du in 0.0f64..3.0) {
            let b = inputs(0.0, vs, xi, bl, bl + du);
            let star = optimal_lambda_numeric(&b, 1e-9);
            let at_star = expected_bound_rhs(&BoundInputs { lambda: star, ..b });
            for l in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0] {
                let at_l = expected_bound_rhs(&BoundInputs { lambda: l, ..b });
                prop_assert!(at_star <= at_l + 1e-9);
            }
        }

        #[test]
        fn closed_form_is_monotone(beta in 0.1f64..10.0, vs in positive(), xi in positive()) {
            let base = optimal_lambda_closed(beta, vs, xi).unwrap();
            prop_assert!(optimal_lambda_closed(beta, vs, 0.5 * xi).unwrap() > base);
            prop_assert!(optimal_lambda_closed(beta, 0.5 * vs, xi).unwrap() < base);
        }

        #[test]
        fn worst_case_dominates_expected(l in 0.0f64..=1.0, vs in 0.0f64..5.0, xi in 0.0f64..5.0, n in 1usize..10_000) {
            let b = BoundInputs { n, ..inputs(l, vs, xi, 0.5, 1.5) };
            prop_assert!(worst_case_bound_rhs(&b) >= expected_bound_rhs(&b));
        }

        #[test]
        fn convergence_bound_decreases_to_neighborhood(l in 0.0f64..=1.0, sigma in 0.0f64..1.0, xi in 0.0f64..1.0, extra in 0.0f64..10.0) {
            let c = neighborhood_c(l, 0.6, 1.4, 0.9, sigma, xi);
            let mut prev = f64::INFINITY;
            for k in 0..200u64 {
                let r = convergence_bound_rhs(&ConvergenceInputs {
                    lambda: l, beta_l: 0.6, beta_u: 1.4, gamma: 0.9,
                    sigma_max: sigma, xi_max: xi, k, init_dist_term: c + extra,
                });
                prop_assert!(r <= prev + 1e-12);
                prop_assert!(r >= c - 1e-12);
                prev = r;
            }
            prop_assert!((prev - c).abs() <= 1e-8 * (1.0 + extra));
        }

        #[test]
        fn worst_case_varsigma_dominates_realized(seed in any::<u64>(), counts in proptest::collection::vec(1usize..50, 12)) {
            let m = TabularMdp::random(4, 3, 0.9, 1.0, seed).unwrap();
            let q = QTable::random(4, 3, m.q_bound(), seed ^ 5);
            let mode = OperatorMode::Optimality;
            let w = varsigma(&q, &m, CountsPolicy::WorstCase, &mode).unwrap();
            let r = varsigma(&q, &m, CountsPolicy::Realized(&counts), &mode).unwrap();
            prop_assert!(w >= r);
        }
    }
}
