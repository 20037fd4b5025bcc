//! Frontier recovery from teacher preferences over a finite policy set,
//! with brute-force dominance oracles and small-task policy enumeration.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{discounted_sum, DiscountConfig, DomainError, Label, Segment, State, Step, Weight};
use crate::envs::{EnvError, EnvKind, Environment};
use crate::teacher::{min_segment_length, PreferenceOracle, TeacherError, TeacherQuery};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParetoError {
    #[error("vectors of dimension {left} and {right} cannot be compared")]
    DimensionMismatch { left: usize, right: usize },
    #[error("segment length {h} is shorter than the longest episode ({longest}) and no separation certificate covers it")]
    InsufficientHorizon { h: usize, longest: usize },
    #[error("policy set would exceed {limit} policies")]
    TooLarge { limit: usize },
    #[error("policy set is empty")]
    Empty,
    #[error("policies disagree on objective count")]
    MixedObjectives,
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// One deterministic policy, represented by its rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRollout {
    pub name: String,
    pub steps: Vec<Step>,
    pub rewards: Vec<Vec<f64>>,
}

impl PolicyRollout {
    /// A one-step stand-in whose single reward is `ret`. Useful for
    /// synthetic instances given only return vectors.
    pub fn from_return(index: usize, ret: Vec<f64>) -> Self {
        PolicyRollout {
            name: format!("p{index}"),
            steps: vec![Step::new(State::Discrete(index), 0)],
            rewards: vec![ret],
        }
    }

    pub fn discounted_return(&self, gamma: f64) -> Vec<f64> {
        discounted_sum(&self.rewards, gamma)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinitePolicySet {
    pub policies: Vec<PolicyRollout>,
}

impl FinitePolicySet {
    pub fn from_returns(returns: &[Vec<f64>]) -> Self {
        FinitePolicySet {
            policies: returns.iter().enumerate().map(|(i, r)| PolicyRollout::from_return(i, r.clone())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn m(&self) -> Result<usize, ParetoError> {
        let first = self.policies.first().ok_or(ParetoError::Empty)?;
        let m = first.rewards.first().map_or(0, Vec::len);
        if self.policies.iter().flat_map(|p| &p.rewards).any(|r| r.len() != m) {
            return Err(ParetoError::MixedObjectives);
        }
        Ok(m)
    }

    pub fn longest(&self) -> usize {
        self.policies.iter().map(|p| p.steps.len()).max().unwrap_or(0)
    }

    pub fn returns(&self, gamma: f64) -> Vec<Vec<f64>> {
        self.policies.iter().map(|p| p.discounted_return(gamma)).collect()
    }
}

/// The `m` simplex vertices.
pub fn identity_weights(m: usize) -> Vec<Weight> {
    (0..m).map(|k| Weight::vertex(m, k)).collect()
}

/// Which teacher-observed relation counts as dominance under the identity
/// weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DominanceRule {
    /// Preferred or indifferent under every vertex, preferred under one.
    #[default]
    Pareto,
    /// Strictly preferred under every vertex.
    StrictAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierConfig {
    pub discount: DiscountConfig,
    /// Minimum weighted-return gap `δ` between compared segments and the
    /// per-step bound `r_max`; licenses truncated segments.
    pub certificate: Option<(f64, f64)>,
    pub rule: DominanceRule,
}

impl FrontierConfig {
    pub fn new(discount: DiscountConfig) -> Self {
        FrontierConfig {
            discount,
            certificate: None,
            rule: DominanceRule::Pareto,
        }
    }
}

/// Component-wise `a ≥ b` with one strict component.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool, ParetoError> {
    if a.len() != b.len() {
        return Err(ParetoError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return Ok(false);
        }
        strict |= x > y;
    }
    Ok(strict)
}

/// Indices of vectors dominated by no other vector. Equal vectors are all kept.
pub fn brute_force_frontier(returns: &[Vec<f64>]) -> Result<Vec<usize>, ParetoError> {
    let mut out = Vec::new();
    'outer: for (i, a) in returns.iter().enumerate() {
        for (j, b) in returns.iter().enumerate() {
            if i != j && dominates(b, a)? {
                continue 'outer;
            }
        }
        out.push(i);
    }
    Ok(out)
}

/// Length-`h` segments of every policy with their true rewards. Shorter
/// rollouts end in absorbing zero-reward steps.
struct Segments {
    segs: Vec<(Segment, Vec<Vec<f64>>)>,
}

impl Segments {
    fn build(ps: &FinitePolicySet, h: usize, cfg: &FrontierConfig) -> Result<Self, ParetoError> {
        if ps.is_empty() {
            return Err(ParetoError::Empty);
        }
        ps.m()?;
        let longest = ps.longest();
        if h < longest {
            let ok = match cfg.certificate {
                Some((delta, r_max)) => h >= min_segment_length(delta, &cfg.discount, r_max)?,
                None => false,
            };
            if !ok || h == 0 {
                return Err(ParetoError::InsufficientHorizon { h, longest });
            }
        }
        let segs = ps
            .policies
            .iter()
            .map(|p| {
                let real = p.steps.len().min(h);
                let seg = Segment::padded(p.steps[..real].to_vec(), h - real)?;
                Ok((seg, p.rewards[..real].to_vec()))
            })
            .collect::<Result<_, DomainError>>()?;
        Ok(Segments { segs })
    }

    /// The teacher's label for (policy `i`, policy `j`) under `w`.
    fn ask<T: PreferenceOracle + ?Sized>(&self, teacher: &T, i: usize, j: usize, w: &Weight) -> Result<Label, ParetoError> {
        let (si, ri) = &self.segs[i];
        let (sj, rj) = &self.segs[j];
        let q = TeacherQuery::new(0, si.clone(), sj.clone(), w.clone())?.with_ground_truth(ri.clone(), rj.clone());
        Ok(teacher.label(&q)?)
    }
}

/// Union over `grid` of the policies no other policy strictly beats under
/// that weight. The per-weight maximum is found by a sequential tournament
/// and each policy is then compared against it, which equals the pairwise
/// test for any transitive teacher.
pub fn convex_frontier<T: PreferenceOracle + ?Sized>(
    ps: &FinitePolicySet,
    grid: &[Weight],
    teacher: &T,
    h: usize,
    cfg: &FrontierConfig,
) -> Result<Vec<usize>, ParetoError> {
    let segs = Segments::build(ps, h, cfg)?;
    let n = ps.len();
    let mut kept = BTreeSet::new();
    for w in grid {
        let mut champion = 0;
        for i in 1..n {
            if segs.ask(teacher, champion, i, w)? == Label::SecondPreferred {
                champion = i;
            }
        }
        for i in 0..n {
            if i == champion || segs.ask(teacher, i, champion, w)? != Label::SecondPreferred {
                kept.insert(i);
            }
        }
    }
    Ok(kept.into_iter().collect())
}

/// `dom[i][j]`: policy `i` dominates policy `j` per the teacher under the
/// identity weights.
fn dominance_matrix<T: PreferenceOracle + ?Sized>(
    segs: &Segments,
    n: usize,
    m: usize,
    teacher: &T,
    rule: DominanceRule,
) -> Result<Vec<Vec<bool>>, ParetoError> {
    let basis = identity_weights(m);
    let mut dom = vec![vec![false; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let labels: Vec<Label> = basis.iter().map(|w| segs.ask(teacher, i, j, w)).collect::<Result<_, _>>()?;
            let (i_over_j, j_over_i) = match rule {
                DominanceRule::StrictAll => (
                    labels.iter().all(|l| *l == Label::FirstPreferred),
                    labels.iter().all(|l| *l == Label::SecondPreferred),
                ),
                DominanceRule::Pareto => {
                    let any = |x: Label| labels.contains(&x);
                    (
                        any(Label::FirstPreferred) && !any(Label::SecondPreferred),
                        any(Label::SecondPreferred) && !any(Label::FirstPreferred),
                    )
                }
            };
            dom[i][j] = i_over_j;
            dom[j][i] = j_over_i;
        }
    }
    Ok(dom)
}

/// Pairwise construction: assign `π_i > π_j` from identity-weight
/// preferences for every pair, then keep the maximal policies.
pub fn nonconvex_frontier_pairwise<T: PreferenceOracle + ?Sized>(
    ps: &FinitePolicySet,
    teacher: &T,
    h: usize,
    cfg: &FrontierConfig,
) -> Result<Vec<usize>, ParetoError> {
    let segs = Segments::build(ps, h, cfg)?;
    let n = ps.len();
    let dom = dominance_matrix(&segs, n, ps.m()?, teacher, cfg.rule)?;
    Ok((0..n).filter(|&i| (0..n).all(|j| !dom[j][i])).collect())
}

/// Insertion construction: each candidate evicts the incumbents it
/// dominates; meeting an incumbent that dominates it stops the scan and the
/// candidate is not added.
pub fn nonconvex_frontier<T: PreferenceOracle + ?Sized>(
    ps: &FinitePolicySet,
    teacher: &T,
    h: usize,
    cfg: &FrontierConfig,
) -> Result<Vec<usize>, ParetoError> {
    let segs = Segments::build(ps, h, cfg)?;
    let n = ps.len();
    let dom = dominance_matrix(&segs, n, ps.m()?, teacher, cfg.rule)?;
    let mut front: Vec<usize> = Vec::new();
    for i in 0..n {
        let mut beaten = false;
        let mut survivors = Vec::with_capacity(front.len() + 1);
        for (pos, &j) in front.iter().enumerate() {
            if dom[i][j] {
                continue;
            }
            if dom[j][i] {
                beaten = true;
                survivors.extend_from_slice(&front[pos..]);
                break;
            }
            survivors.push(j);
        }
        if !beaten {
            survivors.push(i);
        }
        front = survivors;
    }
    front.sort_unstable();
    Ok(front)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerateOptions {
    pub max_count: usize,
    /// Extra detour variants per deep-sea treasure path, each idling one
    /// more step at the start.
    pub wander: usize,
}

impl Default for EnumerateOptions {
    fn default() -> Self {
        EnumerateOptions {
            max_count: 10_000,
            wander: 0,
        }
    }
}

fn rollout(env: &dyn Environment, name: String, actions: &[usize]) -> Result<PolicyRollout, ParetoError> {
    let mut env = env.clone_box();
    let mut state = env.reset(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut steps = Vec::with_capacity(actions.len());
    let mut rewards = Vec::with_capacity(actions.len());
    for &a in actions {
        let out = env.step(a, &mut rng)?;
        steps.push(Step::new(state, a));
        rewards.push(out.reward);
        state = out.next_state;
        if out.terminated || out.truncated {
            break;
        }
    }
    Ok(PolicyRollout { name, steps, rewards })
}

/// Every deterministic behavior of a small deterministic task: each
/// root-to-leaf path of the fruit tree, or the shortest path to each
/// deep-sea treasure (plus optional idle variants).
pub fn enumerate_policies(env: &dyn Environment, opts: &EnumerateOptions) -> Result<FinitePolicySet, ParetoError> {
    let spec = env.spec();
    let too_large = ParetoError::TooLarge { limit: opts.max_count };
    let policies = match spec.kind {
        EnvKind::FruitTree => {
            let n_actions = spec.n_actions();
            let mut depth = 0;
            let mut probe = env.clone_box();
            probe.reset(0);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            loop {
                depth += 1;
                let out = probe.step(0, &mut rng)?;
                if out.terminated || out.truncated {
                    break;
                }
            }
            let count = n_actions.checked_pow(depth as u32).ok_or(too_large.clone())?;
            if count > opts.max_count {
                return Err(too_large);
            }
            (0..count)
                .map(|code| {
                    let mut actions = vec![0; depth];
                    let mut c = code;
                    for slot in actions.iter_mut().rev() {
                        *slot = c % n_actions;
                        c /= n_actions;
                    }
                    let name = actions.iter().map(|a| spec.action_names[*a].as_str()).collect::<Vec<_>>().join("-");
                    rollout(env, name, &actions)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        EnvKind::DeepSeaTreasure => {
            let mut probe = env.clone_box();
            let start = probe.reset(0);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut parent: HashMap<State, (State, usize)> = HashMap::new();
            let mut seen: BTreeSet<usize> = BTreeSet::from([start.index().unwrap_or(0)]);
            let mut queue = VecDeque::from([start.clone()]);
            let mut terminals = Vec::new();
            while let Some(s) = queue.pop_front() {
                for a in 0..spec.n_actions() {
                    let mut e = env.clone_box();
                    e.reset(0);
                    e.set_state(&s)?;
                    let out = e.step(a, &mut rng)?;
                    let key = out.next_state.index().unwrap_or(usize::MAX);
                    if !seen.insert(key) {
                        continue;
                    }
                    parent.insert(out.next_state.clone(), (s.clone(), a));
                    if out.terminated {
                        terminals.push(out.next_state);
                    } else {
                        queue.push_back(out.next_state);
                    }
                }
            }
            terminals.sort_by_key(|s| s.index());
            if terminals.len() * (opts.wander + 1) > opts.max_count {
                return Err(too_large);
            }
            let idle = (0..spec.n_actions())
                .find(|&a| {
                    let mut e = env.clone_box();
                    e.reset(0);
                    e.step(a, &mut rng).is_ok_and(|o| o.next_state == start && !o.terminated)
                })
                .ok_or_else(|| EnvError::Config("start cell has no idle move".into()))?;
            let mut out = Vec::new();
            for t in &terminals {
                let mut path = Vec::new();
                let mut cur = t.clone();
                while let Some((prev, a)) = parent.get(&cur) {
                    path.push(*a);
                    cur = prev.clone();
                }
                path.reverse();
                for extra in 0..=opts.wander {
                    let mut actions = vec![idle; extra];
                    actions.extend(&path);
                    out.push(rollout(env, format!("treasure-{}+{extra}", t), &actions)?);
                }
            }
            out
        }
        EnvKind::ResourceGathering | EnvKind::Energy => return Err(too_large),
    };
    Ok(FinitePolicySet { policies })
}
