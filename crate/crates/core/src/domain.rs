//! Shared domain types: simplex weights, segments, preference records and
//! discounted-return arithmetic.

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops::Add;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for simplex membership.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("weight component {index} is negative ({value})")]
    NegativeComponent { index: usize, value: f64 },
    #[error("weight components sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("need at least 2 objectives, got {0}")]
    BadDimension(usize),
    #[error("expected {expected} entries, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("label must be exactly 0, 0.5 or 1, got {0}")]
    BadLabel(f64),
    #[error("discount factor must lie in (0, 1), got {0}")]
    BadDiscount(f64),
    #[error("non-finite weight component {0}")]
    NonFinite(f64),
}

/// A point on the probability simplex: non-negative importance coefficients
/// summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Weight(Vec<f64>);

impl Weight {
    pub fn new(raw: Vec<f64>) -> Result<Self, DomainError> {
        if raw.len() < 2 {
            return Err(DomainError::BadDimension(raw.len()));
        }
        for (index, &value) in raw.iter().enumerate() {
            if !value.is_finite() {
                return Err(DomainError::NonFinite(value));
            }
            if value < 0.0 {
                return Err(DomainError::NegativeComponent { index, value });
            }
        }
        let sum: f64 = raw.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(DomainError::NotNormalized { sum });
        }
        Ok(Weight(raw))
    }

    /// The `k`-th simplex vertex of dimension `m`.
    pub fn vertex(m: usize, k: usize) -> Self {
        assert!(m >= 2 && k < m);
        let mut v = vec![0.0; m];
        v[k] = 1.0;
        Weight(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `w · v`; panics on dimension mismatch (use [`weighted_return`] for a
    /// checked version).
    #[inline]
    pub fn dot(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(self.0.len(), v.len());
        self.0.iter().zip(v).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<f64>> for Weight {
    type Error = DomainError;
    fn try_from(raw: Vec<f64>) -> Result<Self, Self::Error> {
        Weight::new(raw)
    }
}

impl From<Weight> for Vec<f64> {
    fn from(w: Weight) -> Self {
        w.0
    }
}

/// Validates `raw` as a simplex point. Never renormalizes.
pub fn make_weight(raw: &[f64]) -> Result<Weight, DomainError> {
    Weight::new(raw.to_vec())
}

/// Draws one weight uniformly from the (m-1)-simplex by normalizing `m`
/// independent standard-exponential variates.
pub fn sample_weight<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Weight {
    let draws: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    Weight(draws.into_iter().map(|x| x / total).collect())
}

/// `count` i.i.d. uniform simplex weights, deterministic in `seed`.
pub fn sample_weights(count: usize, m: usize, seed: u64) -> Result<Vec<Weight>, DomainError> {
    if m < 2 {
        return Err(DomainError::BadDimension(m));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| sample_weight(&mut rng, m)).collect())
}

/// Discounted per-objective return.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReturnVector(pub Vec<f64>);

impl ReturnVector {
    pub fn zeros(m: usize) -> Self {
        ReturnVector(vec![0.0; m])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Add for &ReturnVector {
    type Output = ReturnVector;
    fn add(self, rhs: &ReturnVector) -> ReturnVector {
        assert_eq!(self.dim(), rhs.dim());
        ReturnVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

/// `w · r`.
pub fn weighted_return(r: &ReturnVector, w: &Weight) -> Result<f64, DomainError> {
    if r.dim() != w.dim() {
        return Err(DomainError::DimensionMismatch {
            left: r.dim(),
            right: w.dim(),
        });
    }
    Ok(w.dot(&r.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DiscountConfig {
    gamma: f64,
}

impl DiscountConfig {
    pub fn new(gamma: f64) -> Result<Self, DomainError> {
        if gamma > 0.0 && gamma < 1.0 {
            Ok(DiscountConfig { gamma })
        } else {
            Err(DomainError::BadDiscount(gamma))
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for DiscountConfig {
    fn default() -> Self {
        DiscountConfig { gamma: 0.99 }
    }
}

impl TryFrom<f64> for DiscountConfig {
    type Error = DomainError;
    fn try_from(g: f64) -> Result<Self, Self::Error> {
        DiscountConfig::new(g)
    }
}

impl From<DiscountConfig> for f64 {
    fn from(c: DiscountConfig) -> f64 {
        c.gamma
    }
}

/// Environment state: an enumerated index for the tabular tasks, a real
/// vector for the energy task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum State {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl State {
    pub fn index(&self) -> Option<usize> {
        match self {
            State::Discrete(i) => Some(*i),
            State::Continuous(_) => None,
        }
    }
}

impl Eq for State {}

impl Hash for State {
    fn hash<H: Hasher>(&self, h: &mut H) {
        match self {
            State::Discrete(i) => {
                0u8.hash(h);
                i.hash(h);
            }
            State::Continuous(v) => {
                1u8.hash(h);
                for x in v {
                    x.to_bits().hash(h);
                }
            }
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            State::Discrete(i) => write!(f, "#{i}"),
            State::Continuous(v) => write!(f, "{v:?}"),
        }
    }
}

/// One state-action pair of a trajectory.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub state: State,
    pub action: usize,
}

impl Step {
    pub fn new(state: State, action: usize) -> Self {
        Step { state, action }
    }
}

/// Where a segment was cut from the replay buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOrigin {
    pub episode: u64,
    pub start_step: usize,
    pub start_order: u64,
}

/// A contiguous run of state-action pairs, optionally followed by absorbing
/// post-termination steps that carry zero reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    steps: Vec<Step>,
    #[serde(default)]
    absorbing: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<SegmentOrigin>,
}

impl Segment {
    pub fn new(steps: Vec<Step>) -> Result<Self, DomainError> {
        Self::padded(steps, 0)
    }

    /// `steps` followed by `absorbing` zero-reward terminal steps.
    pub fn padded(steps: Vec<Step>, absorbing: usize) -> Result<Self, DomainError> {
        if steps.is_empty() {
            return Err(DomainError::LengthMismatch {
                expected: 1,
                actual: 0,
            });
        }
        Ok(Segment {
            steps,
            absorbing,
            origin: None,
        })
    }

    pub fn with_origin(mut self, origin: SegmentOrigin) -> Self {
        self.origin = Some(origin);
        self
    }

    /// Segment length H, absorbing steps included.
    pub fn len(&self) -> usize {
        self.steps.len() + self.absorbing
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn absorbing(&self) -> usize {
        self.absorbing
    }

    pub fn origin(&self) -> Option<&SegmentOrigin> {
        self.origin.as_ref()
    }
}

/// `Σ_t γ^t r_t` over per-step reward vectors, `t` counted from zero.
pub fn discounted_sum(rewards: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let m = rewards.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; m];
    let mut discount = 1.0;
    for r in rewards {
        for (a, x) in acc.iter_mut().zip(r) {
            *a += discount * x;
        }
        discount *= gamma;
    }
    acc
}

/// Discounted return of a segment given its per-step rewards. Absorbing
/// padding contributes nothing, so `rewards` covers the real steps only.
pub fn discounted_return(
    segment: &Segment,
    rewards: &[Vec<f64>],
    cfg: &DiscountConfig,
) -> Result<ReturnVector, DomainError> {
    if rewards.len() != segment.steps().len() {
        return Err(DomainError::LengthMismatch {
            expected: segment.steps().len(),
            actual: rewards.len(),
        });
    }
    let m = rewards[0].len();
    if let Some(bad) = rewards.iter().find(|r| r.len() != m) {
        return Err(DomainError::DimensionMismatch {
            left: m,
            right: bad.len(),
        });
    }
    Ok(ReturnVector(discounted_sum(rewards, cfg.gamma())))
}

/// Preference label. `SecondPreferred` (value 1) means the second segment
/// is strictly preferred; this is the one place that convention lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum Label {
    FirstPreferred,
    Indifferent,
    SecondPreferred,
}

impl Label {
    /// Numeric label value meaning "second segment preferred".
    pub const SECOND_PREFERRED: f64 = 1.0;

    pub fn value(self) -> f64 {
        match self {
            Label::FirstPreferred => 1.0 - Self::SECOND_PREFERRED,
            Label::Indifferent => 0.5,
            Label::SecondPreferred => Self::SECOND_PREFERRED,
        }
    }

    pub fn from_value(p: f64) -> Result<Self, DomainError> {
        if p == Self::SECOND_PREFERRED {
            Ok(Label::SecondPreferred)
        } else if p == 0.5 {
            Ok(Label::Indifferent)
        } else if p == 1.0 - Self::SECOND_PREFERRED {
            Ok(Label::FirstPreferred)
        } else {
            Err(DomainError::BadLabel(p))
        }
    }

    /// The label the same judgement gets with the segments swapped.
    pub fn swapped(self) -> Self {
        match self {
            Label::FirstPreferred => Label::SecondPreferred,
            Label::Indifferent => Label::Indifferent,
            Label::SecondPreferred => Label::FirstPreferred,
        }
    }

    pub fn is_strict(self) -> bool {
        self != Label::Indifferent
    }
}

impl TryFrom<f64> for Label {
    type Error = DomainError;
    fn try_from(p: f64) -> Result<Self, Self::Error> {
        Label::from_value(p)
    }
}

impl From<Label> for f64 {
    fn from(l: Label) -> f64 {
        l.value()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub first: Segment,
    pub second: Segment,
    pub weight: Weight,
    pub label: Label,
}

/// Barycentric lattice `{ k / resolution : Σ k = resolution }` on the
/// (m-1)-simplex, with nearest-point lookup.
#[derive(Clone, Debug)]
pub struct WeightGrid {
    m: usize,
    resolution: usize,
    points: Vec<Weight>,
    index: HashMap<Vec<u32>, usize>,
}

impl WeightGrid {
    pub fn new(m: usize, resolution: usize) -> Result<Self, DomainError> {
        if m < 2 {
            return Err(DomainError::BadDimension(m));
        }
        assert!(resolution >= 1, "grid resolution must be positive");
        let mut compositions = Vec::new();
        let mut current = vec![0u32; m];
        compose(resolution as u32, 0, &mut current, &mut compositions);
        let mut points = Vec::with_capacity(compositions.len());
        let mut index = HashMap::with_capacity(compositions.len());
        for (i, c) in compositions.into_iter().enumerate() {
            let w: Vec<f64> = c.iter().map(|&k| k as f64 / resolution as f64).collect();
            points.push(Weight(w));
            index.insert(c, i);
        }
        Ok(WeightGrid {
            m,
            resolution,
            points,
            index,
        })
    }

    /// Evaluation grid: 101 points for m=2, 66 for m=3, 252 for m=6.
    pub fn evaluation(m: usize) -> Result<Self, DomainError> {
        let resolution = match m {
            2 => 100,
            3 => 10,
            4 => 8,
            5 => 6,
            6 => 5,
            _ => 3,
        };
        WeightGrid::new(m, resolution)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Weight] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Weight {
        &self.points[i]
    }

    /// Index of the lattice point nearest to `w` (largest-remainder rounding).
    pub fn nearest(&self, w: &Weight) -> usize {
        debug_assert_eq!(w.dim(), self.m);
        let n = self.resolution as f64;
        let scaled: Vec<f64> = w.values().iter().map(|x| x * n).collect();
        let mut counts: Vec<u32> = scaled.iter().map(|x| x.floor().max(0.0) as u32).collect();
        let assigned: u32 = counts.iter().sum();
        let mut deficit = self.resolution as i64 - assigned as i64;
        let mut order: Vec<usize> = (0..self.m).collect();
        order.sort_by(|&a, &b| {
            let fa = scaled[a] - scaled[a].floor();
            let fb = scaled[b] - scaled[b].floor();
            fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut k = 0;
        while deficit > 0 {
            counts[order[k % self.m]] += 1;
            deficit -= 1;
            k += 1;
        }
        while deficit < 0 {
            // only reachable through rounding noise on a lattice point
            let j = order[self.m - 1 - (k % self.m)];
            if counts[j] > 0 {
                counts[j] -= 1;
                deficit += 1;
            }
            k += 1;
        }
        self.index[&counts]
    }
}

fn compose(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let m = current.len();
    if pos == m - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for k in 0..=remaining {
        current[pos] = k;
        compose(remaining - k, pos + 1, current, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_weight_examples() {
        assert_eq!(make_weight(&[0.5, 0.5]).unwrap().values(), &[0.5, 0.5]);
        assert_eq!(make_weight(&[1.0, 0.0, 0.0]).unwrap().values(), &[1.0, 0.0, 0.0]);
        assert!(matches!(
            make_weight(&[0.7, 0.7]),
            Err(DomainError::NotNormalized { .. })
        ));
        assert!(matches!(
            make_weight(&[1.2, -0.2]),
            Err(DomainError::NegativeComponent { index: 1, .. })
        ));
        assert_eq!(make_weight(&[1.0]), Err(DomainError::BadDimension(1)));
    }

    #[test]
    fn sample_weights_is_deterministic() {
        let a = sample_weights(3, 2, 7).unwrap();
        let b = sample_weights(3, 2, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_weights(1, 1, 0), Err(DomainError::BadDimension(1)));
    }

    #[test]
    fn sample_weights_mean_is_centered() {
        let ws = sample_weights(10_000, 2, 1).unwrap();
        let mean = ws.iter().map(|w| w.values()[0]).sum::<f64>() / ws.len() as f64;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
        for w in &ws {
            make_weight(w.values()).unwrap();
        }
    }

    fn seg(n: usize) -> Segment {
        Segment::new((0..n).map(|i| Step::new(State::Discrete(i), 0)).collect()).unwrap()
    }

    #[test]
    fn discounted_return_examples() {
        let cfg = DiscountConfig::new(0.99).unwrap();
        let r = discounted_return(&seg(1), &[vec![3.0, -1.0]], &cfg).unwrap();
        assert_eq!(r.values(), &[3.0, -1.0]);

        let half = DiscountConfig::new(0.5).unwrap();
        let r = discounted_return(&seg(2), &[vec![1.0, 0.0], vec![1.0, 0.0]], &half).unwrap();
        assert_eq!(r.values(), &[1.5, 0.0]);

        assert!(matches!(
            Segment::new(vec![]),
            Err(DomainError::LengthMismatch { .. })
        ));
        assert!(matches!(
            discounted_return(&seg(2), &[vec![1.0, 0.0]], &cfg),
            Err(DomainError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn absorbing_steps_contribute_nothing() {
        let cfg = DiscountConfig::new(0.9).unwrap();
        let padded = Segment::padded(seg(2).steps().to_vec(), 3).unwrap();
        assert_eq!(padded.len(), 5);
        let r = discounted_return(&padded, &[vec![1.0, 1.0], vec![1.0, 1.0]], &cfg).unwrap();
        assert!((r.values()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn weighted_return_examples() {
        let w = make_weight(&[0.5, 0.5]).unwrap();
        assert_eq!(weighted_return(&ReturnVector(vec![2.0, 4.0]), &w).unwrap(), 3.0);
        let e1 = make_weight(&[1.0, 0.0]).unwrap();
        assert_eq!(weighted_return(&ReturnVector(vec![5.0, -1.0]), &e1).unwrap(), 5.0);
        assert!(matches!(
            weighted_return(&ReturnVector(vec![1.0, 2.0, 3.0]), &w),
            Err(DomainError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn label_convention_and_parsing() {
        assert_eq!(Label::from_value(1.0).unwrap(), Label::SecondPreferred);
        assert_eq!(Label::from_value(0.0).unwrap(), Label::FirstPreferred);
        assert_eq!(Label::from_value(0.5).unwrap(), Label::Indifferent);
        assert_eq!(Label::from_value(0.7), Err(DomainError::BadLabel(0.7)));
        assert_eq!(Label::SecondPreferred.swapped(), Label::FirstPreferred);
        let json = serde_json::to_string(&Label::Indifferent).unwrap();
        assert_eq!(json, "0.5");
        assert!(serde_json::from_str::<Label>("0.25").is_err());
    }

    #[test]
    fn weight_rejects_bad_json() {
        assert!(serde_json::from_str::<Weight>("[0.7, 0.7]").is_err());
        let w: Weight = serde_json::from_str("[0.25, 0.75]").unwrap();
        assert_eq!(w.values(), &[0.25, 0.75]);
    }

    #[test]
    fn grid_sizes_match_evaluation_counts() {
        assert_eq!(WeightGrid::evaluation(2).unwrap().len(), 101);
        assert_eq!(WeightGrid::evaluation(3).unwrap().len(), 66);
        assert_eq!(WeightGrid::evaluation(6).unwrap().len(), 252);
    }

    #[test]
    fn grid_nearest_recovers_lattice_points() {
        let g = WeightGrid::new(3, 10).unwrap();
        for (i, w) in g.points().iter().enumerate() {
            assert_eq!(g.nearest(w), i);
        }
        let w = make_weight(&[0.51, 0.29, 0.20]).unwrap();
        assert_eq!(g.point(g.nearest(&w)).values(), &[0.5, 0.3, 0.2]);
    }
}
