use serde::{Deserialize, Serialize};

use crate::data::{perturb_dynamics, DomainPair};
use crate::error::{Error, Result, Violation};
use crate::mdp::TabularMdp;
use crate::seed;

/// The weight grid used when a config does not list one.
pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0];

/// Perturbations of one target use the same random kernel for every `ε`, so
/// sources for different `ε` lie on one segment.
const TAG_PERTURB: u64 = 0x5045_5254;
const TAG_FAMILY: u64 = 0x4641_4d49;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub reward_bound: f64,
    pub reward_seed: u64,
    pub dynamics_seed: u64,
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMetric {
    /// Excess target TD error of the final iterate; lower is better.
    #[default]
    TDGap,
    /// Initial-state value of the greedy policy; higher is better.
    PolicyReturn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pair: PairSpec,
    pub n_list: Vec<usize>,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    pub num_resamples: usize,
    pub num_iterations: usize,
    pub delta: f64,
    pub master_seed: u64,
    #[serde(default)]
    pub eval_metric: EvalMetric,
    /// Resamples for the high-probability check; `num_resamples` if absent.
    #[serde(default)]
    pub high_prob_resamples: Option<usize>,
    /// Resamples for the convergence check; `num_resamples` if absent.
    #[serde(default)]
    pub convergence_resamples: Option<usize>,
    /// Trace length for the convergence check; `num_iterations` if absent.
    #[serde(default)]
    pub convergence_iterations: Option<usize>,
    /// Number of seeded pair families in a sweep.
    #[serde(default = "one")]
    pub num_families: usize,
    #[serde(default = "default_attempts")]
    pub max_coverage_attempts: usize,
}

fn default_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}

fn one() -> usize {
    1
}

fn default_attempts() -> usize {
    10_000
}

impl ExperimentConfig {
    /// The shipped validation suite: 5 states, 3 actions, `γ = 0.9`,
    /// `ε ∈ {0, 0.2, 0.5}`, `n ∈ {100, 400}`, 1000 resamples.
    pub fn default_suite() -> Self {
        ExperimentConfig {
            pair: PairSpec {
                num_states: 5,
                num_actions: 3,
                gamma: 0.9,
                reward_bound: 1.0,
                reward_seed: 11,
                dynamics_seed: 12,
                epsilons: vec![0.0, 0.2, 0.5],
            },
            n_list: vec![100, 400],
            lambda_grid: default_grid(),
            num_resamples: 1000,
            num_iterations: 10,
            delta: 0.1,
            master_seed: 2024,
            eval_metric: EvalMetric::TDGap,
            high_prob_resamples: Some(2000),
            convergence_resamples: Some(200),
            convergence_iterations: Some(50),
            num_families: 1,
            max_coverage_attempts: default_attempts(),
        }
    }

    pub fn high_prob_resamples(&self) -> usize {
        self.high_prob_resamples.unwrap_or(self.num_resamples)
    }

    pub fn convergence_resamples(&self) -> usize {
        self.convergence_resamples.unwrap_or(self.num_resamples)
    }

    pub fn convergence_iterations(&self) -> usize {
        self.convergence_iterations.unwrap_or(self.num_iterations)
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |what: &str, detail: String| {
            out.push(Violation {
                what: what.into(),
                detail,
            })
        };
        let p = &self.pair;
        if p.num_states == 0 || p.num_actions == 0 {
            bad("pair", "needs at least one state and one action".into());
        }
        if !(0.0..1.0).contains(&p.gamma) {
            bad("pair.gamma", format!("{} not in [0, 1)", p.gamma));
        }
        if !(p.reward_bound > 0.0 && p.reward_bound.is_finite()) {
            bad(
                "pair.reward_bound",
                format!("{} not positive", p.reward_bound),
            );
        }
        if p.epsilons.is_empty() {
            bad("pair.epsilons", "empty".into());
        }
        for &e in &p.epsilons {
            if !(0.0..=1.0).contains(&e) {
                bad("pair.epsilons", format!("{e} not in [0, 1]"));
            }
        }
        if self.n_list.is_empty() {
            bad("n_list", "empty".into());
        }
        if self.n_list.contains(&0) {
            bad("n_list", "dataset sizes must be positive".into());
        }
        if self.lambda_grid.is_empty() {
            bad("lambda_grid", "empty".into());
        }
        for &l in &self.lambda_grid {
            if !(0.0..=1.0).contains(&l) {
                bad("lambda_grid", format!("{l} not in [0, 1]"));
            }
        }
        let counts = [
            ("num_resamples", self.num_resamples),
            ("num_iterations", self.num_iterations),
            ("high_prob_resamples", self.high_prob_resamples()),
            ("convergence_resamples", self.convergence_resamples()),
            ("convergence_iterations", self.convergence_iterations()),
            ("num_families", self.num_families),
            ("max_coverage_attempts", self.max_coverage_attempts),
        ];
        for (name, v) in counts {
            if v == 0 {
                bad(name, "must be at least 1".into());
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            bad("delta", format!("{} not in (0, 1)", self.delta));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid {
                kind: "ExperimentConfig",
                violations,
            })
        }
    }

    /// Target MDP: rewards from `reward_seed`, transitions from `dynamics_seed`.
    pub fn target(&self) -> Result<TabularMdp> {
        let p = &self.pair;
        build_target(p, p.reward_seed, p.dynamics_seed)
    }

    /// Target and source for `ε`, both sampled uniformly over cells.
    pub fn pair_for(&self, target: &TabularMdp, epsilon: f64) -> Result<DomainPair> {
        build_pair(target, epsilon, self.pair.dynamics_seed)
    }

    /// Reward and dynamics seeds of sweep family `f`.
    pub fn family_seeds(&self, f: usize) -> (u64, u64) {
        let p = &self.pair;
        (
            seed::derive(p.reward_seed, &[TAG_FAMILY, f as u64]),
            seed::derive(p.dynamics_seed, &[TAG_FAMILY, f as u64]),
        )
    }
}

pub(crate) fn build_target(
    p: &PairSpec,
    reward_seed: u64,
    dynamics_seed: u64,
) -> Result<TabularMdp> {
    let rewards = TabularMdp::random(
        p.num_states,
        p.num_actions,
        p.gamma,
        p.reward_bound,
        reward_seed,
    )?;
    let dynamics = TabularMdp::random(
        p.num_states,
        p.num_actions,
        p.gamma,
        p.reward_bound,
        dynamics_seed,
    )?;
    rewards.with_transitions(dynamics.transitions().to_vec())
}

pub(crate) fn build_pair(
    target: &TabularMdp,
    epsilon: f64,
    dynamics_seed: u64,
) -> Result<DomainPair> {
    let source = perturb_dynamics(target, epsilon, seed::derive(dynamics_seed, &[TAG_PERTURB]))?;
    DomainPair::uniform(target.clone(), source)
}
