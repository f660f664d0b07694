//! Source-domain construction, i.i.d. transition sampling and the
//! distribution-ratio bounds `β_l`, `β_u`.

use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::mdp::{random_row, NestedProbs, TabularMdp, ROW_SUM_TOL};
use crate::seed;

/// A strictly positive distribution `μ[s][a]` over state-action pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NestedProbs", into = "NestedProbs")]
pub struct SamplingDistribution {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TryFrom<NestedProbs> for SamplingDistribution {
    type Error = Error;
    fn try_from(doc: NestedProbs) -> Result<Self> {
        let (ns, na, probs) = doc.flatten()?;
        SamplingDistribution::new(ns, na, probs)
    }
}

impl From<SamplingDistribution> for NestedProbs {
    fn from(d: SamplingDistribution) -> Self {
        NestedProbs::nest(d.num_actions, &d.probs)
    }
}

impl SamplingDistribution {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions || probs.is_empty() {
            return Err(Error::Shape(format!(
                "sampling distribution has {} entries, expected {}",
                probs.len(),
                num_states * num_actions
            )));
        }
        let mut violations = Vec::new();
        if let Some(i) = probs.iter().position(|p| !(*p > 0.0) || !p.is_finite()) {
            violations.push(Violation {
                what: format!("cell ({}, {})", i / num_actions, i % num_actions),
                detail: format!("probability {} is not strictly positive", probs[i]),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            violations.push(Violation {
                what: "total".into(),
                detail: format!("sums to {sum}"),
            });
        }
        if !violations.is_empty() {
            return Err(Error::Invalid {
                kind: "sampling distribution",
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
        let cells = num_states * num_actions;
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / cells as f64; cells],
        }
    }

    /// Flat-Dirichlet draw over all cells.
    pub fn random(num_states: usize, num_actions: usize, seed: u64) -> Result<Self> {
        let probs = random_row(&mut seed::rng(seed), num_states * num_actions);
        Self::new(num_states, num_actions, probs)
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub sp: usize,
}

/// `N` i.i.d. `(s, a, s')` triples with derived counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    num_states: usize,
    num_actions: usize,
    seed: Option<u64>,
    triples: Vec<Transition>,
    counts: Vec<usize>,
    successor_counts: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    n: usize,
    seed: Option<u64>,
    num_states: usize,
    num_actions: usize,
}

impl TransitionDataset {
    pub fn from_triples(
        num_states: usize,
        num_actions: usize,
        triples: Vec<Transition>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut counts = vec![0; num_states * num_actions];
        let mut successor_counts = vec![0; num_states * num_actions * num_states];
        for (i, t) in triples.iter().enumerate() {
            if t.s >= num_states || t.a >= num_actions || t.sp >= num_states {
                return Err(Error::Shape(format!(
                    "triple {i} = ({}, {}, {}) out of range for {num_states}x{num_actions}",
                    t.s, t.a, t.sp
                )));
            }
            let c = t.s * num_actions + t.a;
            counts[c] += 1;
            successor_counts[c * num_states + t.sp] += 1;
        }
        Ok(Self {
            num_states,
            num_actions,
            seed,
            triples,
            counts,
            successor_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Transition] {
        &self.triples
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// `N(s, a)`.
    pub fn count(&self, s: usize, a: usize) -> usize {
        self.counts[s * self.num_actions + a]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// How many triples at `(s, a)` landed in each successor.
    pub fn successor_counts(&self, s: usize, a: usize) -> &[usize] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.successor_counts[start..start + self.num_states]
    }

    /// `P_D̂(s, a) = N(s, a) / N`.
    pub fn empirical_prob(&self, s: usize, a: usize) -> f64 {
        self.count(s, a) as f64 / self.len() as f64
    }

    pub fn empirical_dist(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Header line `{"n", "seed", "num_states", "num_actions"}` followed by one
    /// `{"s", "a", "sp"}` object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DatasetHeader {
            n: self.len(),
            seed: self.seed,
            num_states: self.num_states,
            num_actions: self.num_actions,
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for t in &self.triples {
            serde_json::to_writer(&mut w, t)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Parse("empty dataset file".into())),
        };
        let mut triples = Vec::with_capacity(header.n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            triples.push(serde_json::from_str(&line)?);
        }
        if triples.len() != header.n {
            return Err(Error::Parse(format!(
                "header declares {} transitions, found {}",
                header.n,
                triples.len()
            )));
        }
        Self::from_triples(header.num_states, header.num_actions, triples, header.seed)
    }
}

/// Target and source domains sharing everything but their dynamics.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub target: TabularMdp,
    pub source: TabularMdp,
    pub target_sa: SamplingDistribution,
    pub source_sa: SamplingDistribution,
}

impl DomainPair {
    pub fn new(
        target: TabularMdp,
        source: TabularMdp,
        target_sa: SamplingDistribution,
        source_sa: SamplingDistribution,
    ) -> Result<Self> {
        let same = target.num_states() == source.num_states()
            && target.num_actions() == source.num_actions()
            && target.rewards() == source.rewards()
            && target.initial_dist() == source.initial_dist()
            && target.discount() == source.discount()
            && target.reward_bound() == source.reward_bound();
        if !same {
            return Err(Error::Shape(
                "target and source must share states, actions, rewards, initial distribution, discount and reward bound".into(),
            ));
        }
        for d in [&target_sa, &source_sa] {
            if d.num_states != target.num_states() || d.num_actions != target.num_actions() {
                return Err(Error::Shape(
                    "sampling distribution shape differs from MDP".into(),
                ));
            }
        }
        Ok(Self {
            target,
            source,
            target_sa,
            source_sa,
        })
    }

    /// Uniform state-action distributions in both domains.
    pub fn uniform(target: TabularMdp, source: TabularMdp) -> Result<Self> {
        let (ns, na) = (target.num_states(), target.num_actions());
        Self::new(
            target,
            source,
            SamplingDistribution::uniform(ns, na),
            SamplingDistribution::uniform(ns, na),
        )
    }
}

/// Source dynamics `P' = (1 − ε) P + ε R` with `R` a seeded random
/// stochastic tensor. Everything else is copied from `mdp`.
pub fn perturb_dynamics(mdp: &TabularMdp, epsilon: f64, seed: u64) -> Result<TabularMdp> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::OutOfRange {
            name: "epsilon",
            value: epsilon,
            range: "[0, 1]",
        });
    }
    let ns = mdp.num_states();
    let mut rng = seed::rng(seed);
    let mut transition = Vec::with_capacity(mdp.transitions().len());
    for s in 0..ns {
        for a in 0..mdp.num_actions() {
            let noise = random_row(&mut rng, ns);
            transition.extend(
                mdp.row(s, a)
                    .iter()
                    .zip(&noise)
                    .map(|(p, r)| (1.0 - epsilon) * p + epsilon * r),
            );
        }
    }
    mdp.with_transitions(transition)
}

/// Per-row categorical samplers for an MDP's transition tensor.
struct RowSamplers(Vec<WeightedIndex<f64>>);

impl RowSamplers {
    fn new(mdp: &TabularMdp) -> Self {
        let rows = (0..mdp.num_states())
            .flat_map(|s| (0..mdp.num_actions()).map(move |a| (s, a)))
            .map(|(s, a)| WeightedIndex::new(mdp.row(s, a)).expect("validated stochastic row"))
            .collect();
        Self(rows)
    }
}

/// Draws `n` i.i.d. triples: `(s, a) ~ sa_dist`, then `s' ~ P[s][a][·]`.
pub fn sample_dataset(
    mdp: &TabularMdp,
    sa_dist: &SamplingDistribution,
    n: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    if n == 0 {
        return Err(Error::OutOfRange {
            name: "n",
            value: 0.0,
            range: "[1, inf)",
        });
    }
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    if sa_dist.num_states != ns || sa_dist.num_actions != na {
        return Err(Error::Shape(
            "sampling distribution shape differs from MDP".into(),
        ));
    }
    let cell_sampler = WeightedIndex::new(sa_dist.probs()).expect("validated distribution");
    let rows = RowSamplers::new(mdp);
    let mut rng = seed::rng(seed);
    let triples = (0..n)
        .map(|_| {
            let c = cell_sampler.sample(&mut rng);
            let sp = rows.0[c].sample(&mut rng);
            Transition {
                s: c / na,
                a: c % na,
                sp,
            }
        })
        .collect();
    TransitionDataset::from_triples(ns, na, triples, Some(seed))
}

/// Resamples until every cell is covered. Attempt `i` uses seed
/// `derive(seed, [i])`.
pub fn sample_covering_dataset(
    mdp: &TabularMdp,
    sa_dist: &SamplingDistribution,
    n: usize,
    seed: u64,
    max_attempts: usize,
) -> Result<TransitionDataset> {
    for attempt in 0..max_attempts {
        let ds = sample_dataset(mdp, sa_dist, n, seed::derive(seed, &[attempt as u64]))?;
        if coverage_check(&ds).is_ok() {
            return Ok(ds);
        }
    }
    Err(Error::CoverageRetriesExhausted(max_attempts))
}

/// Succeeds iff `N(s, a) ≥ 1` everywhere.
pub fn coverage_check(dataset: &TransitionDataset) -> Result<()> {
    let missing: Vec<(usize, usize)> = dataset
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| (i / dataset.num_actions, i % dataset.num_actions))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Uncovered(missing))
    }
}

/// `(β_l, β_u)`: extreme values of `P_D̂/P_D'`, `P_D̂/P_D` and `P_D'/P_D`
/// over every cell.
pub fn beta_bounds(
    p_hat: &[f64],
    p_source: &SamplingDistribution,
    p_target: &SamplingDistribution,
) -> Result<(f64, f64)> {
    let na = p_target.num_actions;
    if p_hat.len() != p_target.probs.len() || p_source.probs.len() != p_target.probs.len() {
        return Err(Error::Shape("distribution tables differ in size".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, ((&h, &src), &tgt)) in p_hat
        .iter()
        .zip(&p_source.probs)
        .zip(&p_target.probs)
        .enumerate()
    {
        if !(h > 0.0) {
            return Err(Error::ZeroProbability {
                which: "empirical distribution",
                s: i / na,
                a: i % na,
            });
        }
        for ratio in [h / src, h / tgt, src / tgt] {
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
    }
    Ok((lo, hi))
}
