//! Similar-domain selection: prefix candidate sets from the distance ranking,
//! a value table keyed by canonical subset, and decaying epsilon-greedy choice.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototype::{distance_matrix, rank_domains, DomainDistanceMatrix, PrototypeSet};

/// Sorted, duplicate-free list of domain ids.
pub type Subset = Vec<usize>;

pub fn canonical(mut members: Vec<usize>) -> Subset {
    members.sort_unstable();
    members.dedup();
    members
}

/// The `D` prefixes of `ranking`: `{d}`, `{d, next}`, ..., all domains.
pub fn candidate_states(ranking: &[usize]) -> Result<Vec<Subset>> {
    let n = ranking.len();
    if n == 0 {
        return Err(Error::Usage("empty ranking".into()));
    }
    let mut seen = vec![false; n];
    for &d in ranking {
        if d >= n || std::mem::replace(&mut seen[d], true) {
            return Err(Error::Usage(format!(
                "ranking {ranking:?} is not a permutation"
            )));
        }
    }
    Ok((1..=n).map(|k| canonical(ranking[..k].to_vec())).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ValueAggregation {
    /// Running mean of every reward seen for the subset.
    #[default]
    Mean,
    /// Most recent reward only.
    Last,
    /// Exponential moving average with weight `alpha` on the new reward.
    Ema { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEntry {
    pub value: f64,
    pub count: u64,
}

/// Per-domain value estimates keyed by canonical subset.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    domains: Vec<BTreeMap<Subset, ValueEntry>>,
    aggregation: ValueAggregation,
}

impl ValueTable {
    pub fn new(domains: usize, aggregation: ValueAggregation) -> Self {
        Self {
            domains: vec![BTreeMap::new(); domains],
            aggregation,
        }
    }

    pub fn get(&self, domain: usize, subset: &[usize]) -> Option<ValueEntry> {
        self.domains[domain].get(subset).copied()
    }

    pub fn entries(&self, domain: usize) -> impl Iterator<Item = (&Subset, &ValueEntry)> {
        self.domains[domain].iter()
    }

    pub fn update(&mut self, domain: usize, subset: &[usize], reward: f64) -> Result<()> {
        if !reward.is_finite() {
            return Err(Error::NonFinite {
                name: format!("reward of domain {domain}"),
            });
        }
        let key = canonical(subset.to_vec());
        let entry = self.domains[domain].entry(key).or_insert(ValueEntry {
            value: 0.0,
            count: 0,
        });
        entry.count += 1;
        entry.value = match self.aggregation {
            ValueAggregation::Mean => entry.value + (reward - entry.value) / entry.count as f64,
            ValueAggregation::Last => reward,
            ValueAggregation::Ema { alpha } => {
                if entry.count == 1 {
                    reward
                } else {
                    entry.value + alpha * (reward - entry.value)
                }
            }
        };
        Ok(())
    }
}

/// Exploration probability with geometric decay and the selection period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub p0: f64,
    pub p: f64,
    pub decay_rate: f64,
    /// Iterations between selection rounds.
    pub period: usize,
    pub rounds: u64,
}

impl Policy {
    pub fn new(p0: f64, decay_rate: f64, period: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&p0) {
            return Err(Error::Config(format!(
                "initial exploration probability {p0} outside [0, 1]"
            )));
        }
        if !(decay_rate > 0.0 && decay_rate <= 1.0) {
            return Err(Error::Config(format!(
                "decay rate {decay_rate} outside (0, 1]"
            )));
        }
        if period == 0 {
            return Err(Error::Config("selection period must be positive".into()));
        }
        Ok(Self {
            p0,
            p: p0,
            decay_rate,
            period,
            rounds: 0,
        })
    }

    /// Whether a selection round runs at this iteration.
    pub fn fires(&self, iter: u64) -> bool {
        iter.is_multiple_of(self.period as u64)
    }

    pub fn decay(&mut self) {
        self.rounds += 1;
        self.p *= self.decay_rate;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Choice {
    pub subset: Subset,
    pub explored: bool,
}

/// Epsilon-greedy choice among `candidates` for `domain`.
///
/// Draws `rnd` in `[0, 1)`; when `rnd <= p` a candidate is picked uniformly,
/// otherwise the highest-valued one. Unvisited candidates count as `+inf`;
/// ties go to the smaller subset.
pub fn select<R: Rng + ?Sized>(
    domain: usize,
    candidates: &[Subset],
    table: &ValueTable,
    p: f64,
    rng: &mut R,
) -> Result<Choice> {
    if candidates.is_empty() {
        return Err(Error::Usage(format!(
            "no candidate sets for domain {domain}"
        )));
    }
    let rnd: f64 = rng.random();
    if rnd <= p {
        let k = rng.random_range(0..candidates.len());
        return Ok(Choice {
            subset: candidates[k].clone(),
            explored: true,
        });
    }
    Ok(Choice {
        subset: greedy(domain, candidates, table).clone(),
        explored: false,
    })
}

/// Highest-valued candidate under the optimistic rule, ignoring exploration.
pub fn greedy<'a>(domain: usize, candidates: &'a [Subset], table: &ValueTable) -> &'a Subset {
    let value = |s: &Subset| table.get(domain, s).map_or(f64::INFINITY, |e| e.value);
    candidates
        .iter()
        .max_by(|a, b| {
            value(a)
                .total_cmp(&value(b))
                .then_with(|| b.len().cmp(&a.len()))
                .then_with(|| b.cmp(a))
        })
        .expect("candidates is non-empty")
}

/// One audited selection round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub iter: u64,
    /// Exploration probability used for this round's choices.
    pub p: f64,
    pub distances: DomainDistanceMatrix,
    pub rankings: Vec<Vec<usize>>,
    /// Subsets active while the rewards were earned.
    pub previous: Vec<Subset>,
    pub rewards: Vec<f64>,
    pub chosen: Vec<Subset>,
    pub explored: Vec<bool>,
}

/// Stateful selector run alongside training.
#[derive(Clone, Debug)]
pub struct Selector {
    pub table: ValueTable,
    pub policy: Policy,
    current: Vec<Subset>,
    pinned: Option<Vec<Subset>>,
    rng: ChaCha8Rng,
}

impl Selector {
    /// Starts with every domain sharing with all domains.
    pub fn new(domains: usize, policy: Policy, aggregation: ValueAggregation, seed: u64) -> Self {
        let all: Subset = (0..domains).collect();
        Self {
            table: ValueTable::new(domains, aggregation),
            policy,
            current: vec![all; domains],
            pinned: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Keeps rounds running (rewards, values, trace) but always applies
    /// `subsets` instead of the chosen ones.
    pub fn pin(&mut self, subsets: Vec<Subset>) -> Result<()> {
        validate_subsets(&subsets, self.current.len())?;
        self.current = subsets.clone();
        self.pinned = Some(subsets);
        Ok(())
    }

    pub fn current(&self) -> &[Subset] {
        &self.current
    }

    /// Greedy subset per domain under the current value table and the given
    /// rankings.
    pub fn greedy_subsets(&self, rankings: &[Vec<usize>]) -> Result<Vec<Subset>> {
        rankings
            .iter()
            .enumerate()
            .map(|(d, r)| Ok(greedy(d, &candidate_states(r)?, &self.table).clone()))
            .collect()
    }

    /// Runs one round: distances from `prototypes`, value updates with
    /// `rewards` credited to the currently active subsets, fresh choices and
    /// decay of the exploration probability.
    pub fn round(
        &mut self,
        iter: u64,
        prototypes: &[PrototypeSet],
        rewards: &[f64],
    ) -> Result<RoundRecord> {
        let domains = self.current.len();
        if prototypes.len() != domains || rewards.len() != domains {
            return Err(Error::Usage(format!(
                "round needs {domains} prototype sets and rewards, got {} and {}",
                prototypes.len(),
                rewards.len()
            )));
        }
        let distances = distance_matrix(prototypes)?;
        let rankings = (0..domains)
            .map(|d| rank_domains(&distances, d))
            .collect::<Result<Vec<_>>>()?;
        let p = self.policy.p;
        let previous = self.current.clone();
        let mut chosen = Vec::with_capacity(domains);
        let mut explored = Vec::with_capacity(domains);
        for d in 0..domains {
            self.table.update(d, &previous[d], rewards[d])?;
            let candidates = candidate_states(&rankings[d])?;
            let choice = select(d, &candidates, &self.table, p, &mut self.rng)?;
            chosen.push(choice.subset);
            explored.push(choice.explored);
        }
        self.current = match &self.pinned {
            Some(pinned) => pinned.clone(),
            None => chosen.clone(),
        };
        let record = RoundRecord {
            round: self.policy.rounds,
            iter,
            p,
            distances,
            rankings,
            previous,
            rewards: rewards.to_vec(),
            chosen,
            explored,
        };
        self.policy.decay();
        Ok(record)
    }
}

/// Checks `d in S^d` and that every member names a real domain.
pub fn validate_subsets(subsets: &[Subset], domains: usize) -> Result<()> {
    if subsets.len() != domains {
        return Err(Error::Config(format!(
            "{} subsets for {domains} domains",
            subsets.len()
        )));
    }
    for (d, s) in subsets.iter().enumerate() {
        if !s.contains(&d) {
            return Err(Error::Invariant(format!(
                "domain {d} missing from its own subset {s:?}"
            )));
        }
        if s.iter().any(|&m| m >= domains) {
            return Err(Error::Config(format!(
                "subset {s:?} names an unknown domain"
            )));
        }
    }
    Ok(())
}

/// Every subset of `0..domains` that contains `domain`, smallest first.
pub fn subsets_containing(domain: usize, domains: usize) -> Vec<Subset> {
    let others: Vec<usize> = (0..domains).filter(|&j| j != domain).collect();
    let mut out: Vec<Subset> = (0u64..1 << others.len())
        .map(|mask| {
            let mut s: Vec<usize> = vec![domain];
            s.extend(
                others
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| mask >> k & 1 == 1)
                    .map(|(_, &j)| j),
            );
            canonical(s)
        })
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
    out
}
