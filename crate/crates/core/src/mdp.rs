//! Finite MDPs and exact Bellman operators.
//!
//! All tables are stored row-major: `reward[s * A + a]`,
//! `transition[(s * A + a) * S + s']`. The return criterion is the
//! infinite-horizon discounted return; there is no finite horizon.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::seed;

/// Tolerance on probability row sums.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Default value-iteration tolerance.
pub const VALUE_ITERATION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    reward_bound: f64,
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
}

/// On-disk layout: nested arrays, `transition[s][a][s']`, `reward[s][a]`.
#[derive(Serialize, Deserialize)]
struct MdpDocument {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    reward_bound: f64,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    initial_dist: Vec<f64>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let (ns, na) = (doc.num_states, doc.num_actions);
        if doc.transition.len() != ns
            || doc
                .transition
                .iter()
                .any(|r| r.len() != na || r.iter().any(|row| row.len() != ns))
        {
            return Err(Error::Shape(format!("transition must be {ns}x{na}x{ns}")));
        }
        if doc.reward.len() != ns || doc.reward.iter().any(|r| r.len() != na) {
            return Err(Error::Shape(format!("reward must be {ns}x{na}")));
        }
        Self::unchecked(
            ns,
            na,
            doc.discount,
            doc.reward_bound,
            doc.transition.into_iter().flatten().flatten().collect(),
            doc.reward.into_iter().flatten().collect(),
            doc.initial_dist,
        )
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(m: TabularMdp) -> Self {
        let (ns, na) = (m.num_states, m.num_actions);
        MdpDocument {
            num_states: ns,
            num_actions: na,
            discount: m.discount,
            reward_bound: m.reward_bound,
            transition: m
                .transition
                .chunks(na * ns)
                .map(|block| block.chunks(ns).map(<[f64]>::to_vec).collect())
                .collect(),
            reward: m.reward.chunks(na).map(<[f64]>::to_vec).collect(),
            initial_dist: m.initial_dist,
        }
    }
}

impl TabularMdp {
    /// Builds an MDP and checks every invariant.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        discount: f64,
        reward_bound: f64,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self::unchecked(
            num_states,
            num_actions,
            discount,
            reward_bound,
            transition,
            reward,
            initial_dist,
        )?;
        mdp.validate()?;
        Ok(mdp)
    }

    /// Builds an MDP checking only table shapes. Call [`validate`](Self::validate)
    /// before handing the result to any operator.
    pub fn unchecked(
        num_states: usize,
        num_actions: usize,
        discount: f64,
        reward_bound: f64,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Shape(
                "need at least one state and one action".into(),
            ));
        }
        let cells = num_states * num_actions;
        if transition.len() != cells * num_states {
            return Err(Error::Shape(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                cells * num_states
            )));
        }
        if reward.len() != cells {
            return Err(Error::Shape(format!(
                "reward has {} entries, expected {cells}",
                reward.len()
            )));
        }
        if initial_dist.len() != num_states {
            return Err(Error::Shape(format!(
                "initial_dist has {} entries, expected {num_states}",
                initial_dist.len()
            )));
        }
        Ok(Self {
            num_states,
            num_actions,
            discount,
            reward_bound,
            transition,
            reward,
            initial_dist,
        })
    }

    /// Random MDP: rewards uniform in `(-0.99 B, 0.99 B)`, transition rows
    /// drawn from a flat Dirichlet, uniform initial distribution.
    pub fn random(
        num_states: usize,
        num_actions: usize,
        discount: f64,
        reward_bound: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let cells = num_states * num_actions;
        let reward = (0..cells)
            .map(|_| 0.99 * reward_bound * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        let mut transition = Vec::with_capacity(cells * num_states);
        for _ in 0..cells {
            transition.extend(random_row(&mut rng, num_states));
        }
        let initial_dist = vec![1.0 / num_states as f64; num_states];
        Self::new(
            num_states,
            num_actions,
            discount,
            reward_bound,
            transition,
            reward,
            initial_dist,
        )
    }

    /// Lists every violated invariant.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let (ns, na) = (self.num_states, self.num_actions);
        if !(0.0..1.0).contains(&self.discount) {
            out.push(Violation {
                what: "discount".into(),
                detail: format!("{} not in [0, 1)", self.discount),
            });
        }
        if !(self.reward_bound > 0.0) || !self.reward_bound.is_finite() {
            out.push(Violation {
                what: "reward_bound".into(),
                detail: format!("{} must be positive and finite", self.reward_bound),
            });
        }
        for s in 0..ns {
            for a in 0..na {
                let row = self.row(s, a);
                check_distribution(&mut out, &format!("transition row ({s}, {a})"), row);
                let r = self.reward(s, a);
                if !r.is_finite() || r.abs() >= self.reward_bound {
                    out.push(Violation {
                        what: format!("reward ({s}, {a})"),
                        detail: format!(
                            "|{r}| must be strictly below reward_bound {} (excess {})",
                            self.reward_bound,
                            r.abs() - self.reward_bound
                        ),
                    });
                }
            }
        }
        check_distribution(&mut out, "initial_dist", &self.initial_dist);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid {
                kind: "MDP",
                violations,
            })
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_cells(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// Next-state distribution `P[s][a][·]`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let ns = self.num_states;
        let start = (s * self.num_actions + a) * ns;
        &self.transition[start..start + ns]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Same MDP with a different transition tensor.
    pub fn with_transitions(&self, transition: Vec<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.discount,
            self.reward_bound,
            transition,
            self.reward.clone(),
            self.initial_dist.clone(),
        )
    }

    /// Same MDP with a different discount.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        let mut m = self.clone();
        m.discount = discount;
        m.validate()?;
        Ok(m)
    }

    /// `B / (1 - γ)`, the sup-norm bound on any Q-table reachable by backups.
    pub fn q_bound(&self) -> f64 {
        self.reward_bound / (1.0 - self.discount)
    }

    /// Whether `P[s][a][·]` puts mass on more than one successor.
    pub fn is_stochastic_row(&self, s: usize, a: usize) -> bool {
        self.row(s, a).iter().filter(|&&p| p > 0.0).count() > 1
    }
}

fn check_distribution(out: &mut Vec<Violation>, what: &str, row: &[f64]) {
    if let Some((i, p)) = row
        .iter()
        .enumerate()
        .find(|(_, p)| !(**p >= 0.0) || !p.is_finite())
    {
        out.push(Violation {
            what: what.to_string(),
            detail: format!("entry {i} = {p} is negative or non-finite"),
        });
        return;
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        out.push(Violation {
            what: what.to_string(),
            detail: format!("sums to {sum} (off by {:e})", sum - 1.0),
        });
    }
}

/// Flat-Dirichlet stochastic row, renormalized so the sum is 1 to rounding.
pub(crate) fn random_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    row
}

/// A Q-function as a dense `|S| x |A|` table.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self::filled(num_states, num_actions, 0.0)
    }

    pub fn filled(num_states: usize, num_actions: usize, v: f64) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![v; num_states * num_actions],
        }
    }

    pub fn from_vec(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return Err(Error::Shape(format!(
                "Q-table has {} entries, expected {}",
                values.len(),
                num_states * num_actions
            )));
        }
        Ok(Self {
            num_states,
            num_actions,
            values,
        })
    }

    pub fn from_fn(num_states: usize, num_actions: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..num_states)
            .flat_map(|s| (0..num_actions).map(move |a| (s, a)))
            .map(|(s, a)| f(s, a))
            .collect();
        Self {
            num_states,
            num_actions,
            values,
        }
    }

    /// Entries uniform in `[-bound, bound]`.
    pub fn random(num_states: usize, num_actions: usize, bound: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let values = (0..num_states * num_actions)
            .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Self {
            num_states,
            num_actions,
            values,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.num_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `‖self − other‖∞`.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    /// `Σ μ(s,a) |self(s,a) − other(s,a)|`.
    pub fn weighted_abs_distance(&self, other: &QTable, weights: &[f64]) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .zip(weights)
            .map(|((x, y), w)| w * (x - y).abs())
            .sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite {
                s: i / self.num_actions,
                a: i % self.num_actions,
            }),
            None => Ok(()),
        }
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.num_states != mdp.num_states || self.num_actions != mdp.num_actions {
            return Err(Error::Shape(format!(
                "Q-table is {}x{}, MDP is {}x{}",
                self.num_states, self.num_actions, mdp.num_states, mdp.num_actions
            )));
        }
        Ok(())
    }
}

/// A stochastic policy `π[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NestedProbs", into = "NestedProbs")]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

/// `{"probs": [[...], ...]}`, shared by policies and sampling distributions.
#[derive(Serialize, Deserialize)]
pub(crate) struct NestedProbs {
    pub(crate) probs: Vec<Vec<f64>>,
}

impl NestedProbs {
    pub(crate) fn flatten(self) -> Result<(usize, usize, Vec<f64>)> {
        let ns = self.probs.len();
        let na = self.probs.first().map_or(0, Vec::len);
        if ns == 0 || na == 0 || self.probs.iter().any(|r| r.len() != na) {
            return Err(Error::Shape(
                "probability table must be a non-empty rectangle".into(),
            ));
        }
        Ok((ns, na, self.probs.into_iter().flatten().collect()))
    }

    pub(crate) fn nest(num_actions: usize, flat: &[f64]) -> Self {
        Self {
            probs: flat.chunks(num_actions).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl TryFrom<NestedProbs> for Policy {
    type Error = Error;
    fn try_from(doc: NestedProbs) -> Result<Self> {
        let (ns, na, probs) = doc.flatten()?;
        Policy::new(ns, na, probs)
    }
}

impl From<Policy> for NestedProbs {
    fn from(p: Policy) -> Self {
        NestedProbs::nest(p.num_actions, &p.probs)
    }
}

impl Policy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions {
            return Err(Error::Shape(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                num_states * num_actions
            )));
        }
        let mut violations = Vec::new();
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(&mut violations, &format!("policy row {s}"), row);
        }
        if !violations.is_empty() {
            return Err(Error::Invalid {
                kind: "policy",
                violations,
            });
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * num_actions + a] = 1.0;
        }
        Self {
            num_states: actions.len(),
            num_actions,
            probs,
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

/// Which Bellman operator a backup uses.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum OperatorMode {
    /// `r + γ E[max_a' Q(s', a')]`.
    #[default]
    Optimality,
    /// `r + γ E[Σ_a' π(a'|s') Q(s', a')]`.
    PolicyEvaluation(Policy),
}

impl OperatorMode {
    /// Next-state value `V(s')` for every state.
    pub fn state_values(&self, q: &QTable) -> Vec<f64> {
        (0..q.num_states())
            .map(|s| self.state_value(q, s))
            .collect()
    }

    pub fn state_value(&self, q: &QTable, s: usize) -> f64 {
        match self {
            OperatorMode::Optimality => q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max),
            OperatorMode::PolicyEvaluation(pi) => {
                q.row(s).iter().zip(pi.row(s)).map(|(v, p)| p * v).sum()
            }
        }
    }

    fn check(&self, q: &QTable) -> Result<()> {
        if let OperatorMode::PolicyEvaluation(pi) = self {
            if pi.num_states != q.num_states() || pi.num_actions != q.num_actions() {
                return Err(Error::Shape("policy shape differs from Q-table".into()));
            }
        }
        Ok(())
    }
}

/// `(B Q)(s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) V(s')` given precomputed `V`.
pub(crate) fn backup_from_values(mdp: &TabularMdp, values: &[f64]) -> QTable {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let g = mdp.discount;
    let out = (0..ns * na)
        .map(|c| {
            let row = &mdp.transition[c * ns..(c + 1) * ns];
            let ev: f64 = row.iter().zip(values).map(|(p, v)| p * v).sum();
            mdp.reward[c] + g * ev
        })
        .collect();
    QTable {
        num_states: ns,
        num_actions: na,
        values: out,
    }
}

pub(crate) fn check_inputs(mdp: &TabularMdp, q: &QTable, mode: &OperatorMode) -> Result<()> {
    q.check_shape(mdp)?;
    q.check_finite()?;
    mode.check(q)
}

/// Exact Bellman backup of `q` under `mdp`.
pub fn exact_backup(mdp: &TabularMdp, q: &QTable, mode: &OperatorMode) -> Result<QTable> {
    check_inputs(mdp, q, mode)?;
    Ok(backup_from_values(mdp, &mode.state_values(q)))
}

/// One-sample backup `r + γ V(s')`.
pub fn stochastic_backup(
    q: &QTable,
    reward: f64,
    discount: f64,
    next_state: usize,
    mode: &OperatorMode,
) -> Result<f64> {
    if next_state >= q.num_states() {
        return Err(Error::Shape(format!(
            "next state {next_state} out of range for {} states",
            q.num_states()
        )));
    }
    Ok(reward + discount * mode.state_value(q, next_state))
}

/// Value iteration to a Q-table whose Bellman residual is at most `tol`
/// and whose distance to the fixed point is at most `γ tol`.
pub fn optimal_q(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(Error::OutOfRange {
            name: "tol",
            value: tol,
            range: "(0, inf)",
        });
    }
    let mode = OperatorMode::Optimality;
    let threshold = tol * (1.0 - mdp.discount);
    let mut q = QTable::zeros(mdp.num_states, mdp.num_actions);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let next = backup_from_values(mdp, &mode.state_values(&q));
        residual = next.sup_distance(&q);
        q = next;
        if residual <= threshold {
            return Ok(q);
        }
    }
    Err(Error::NotConverged {
        iters: max_iters,
        residual,
    })
}

/// Argmax per state, ties to the lowest action index.
pub fn greedy_actions(q: &QTable) -> Vec<usize> {
    (0..q.num_states())
        .map(|s| {
            let row = q.row(s);
            let mut best = 0;
            for a in 1..row.len() {
                if row[a] > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

pub fn greedy_policy(q: &QTable) -> Policy {
    Policy::deterministic(q.num_actions(), &greedy_actions(q))
}

/// `Σ_s ρ(s) V^π(s)` by fixed-point iteration on `V = r_π + γ P_π V`.
pub fn policy_value(mdp: &TabularMdp, policy: &Policy, tol: f64) -> Result<f64> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    if policy.num_states != ns || policy.num_actions != na {
        return Err(Error::Shape("policy shape differs from MDP".into()));
    }
    let g = mdp.discount;
    let r_pi: Vec<f64> = (0..ns)
        .map(|s| (0..na).map(|a| policy.prob(s, a) * mdp.reward(s, a)).sum())
        .collect();
    let mut p_pi = vec![0.0; ns * ns];
    for s in 0..ns {
        for a in 0..na {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (t, p) in mdp.row(s, a).iter().enumerate() {
                p_pi[s * ns + t] += w * p;
            }
        }
    }
    let mut v = vec![0.0; ns];
    let max_iters = 10_000_000 / ns.max(1);
    for _ in 0..max_iters {
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                let ev: f64 = p_pi[s * ns..(s + 1) * ns]
                    .iter()
                    .zip(&v)
                    .map(|(p, x)| p * x)
                    .sum();
                r_pi[s] + g * ev
            })
            .collect();
        let delta = next
            .iter()
            .zip(&v)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        // ‖V_t − V^π‖∞ ≤ γ/(1−γ) ‖V_t − V_{t−1}‖∞
        if g == 0.0 || delta * g / (1.0 - g) <= tol {
            return Ok(v.iter().zip(&mdp.initial_dist).map(|(x, r)| x * r).sum());
        }
    }
    Err(Error::NotConverged {
        iters: max_iters,
        residual: f64::NAN,
    })
}
