//! Preference providers: the scripted teacher that compares ground-truth
//! weighted returns, and the asynchronous teacher contract.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{discounted_return, DiscountConfig, DomainError, Label, PreferenceRecord, Segment, Weight};

/// Returns closer than this compare as indifferent.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeacherError {
    #[error("query {0} carries no ground-truth rewards")]
    MissingGroundTruth(u64),
    #[error("segments of one query must have equal length ({first} vs {second})")]
    LengthMismatch { first: usize, second: usize },
    #[error("bad bound: {0}")]
    BadBound(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("teacher unavailable: {0}")]
    Unavailable(String),
}

/// Per-step true rewards of both segments (real steps only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherQuery {
    pub id: u64,
    pub first: Segment,
    pub second: Segment,
    pub weight: Weight,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
    /// Training step at which the query was issued.
    pub created_step: u64,
}

impl TeacherQuery {
    pub fn new(id: u64, first: Segment, second: Segment, weight: Weight) -> Result<Self, TeacherError> {
        if first.len() != second.len() {
            return Err(TeacherError::LengthMismatch {
                first: first.len(),
                second: second.len(),
            });
        }
        Ok(TeacherQuery {
            id,
            first,
            second,
            weight,
            ground_truth: None,
            created_step: 0,
        })
    }

    pub fn with_ground_truth(mut self, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Self {
        self.ground_truth = Some(GroundTruth { first, second });
        self
    }

    pub fn at_step(mut self, step: u64) -> Self {
        self.created_step = step;
        self
    }

    /// The same question with the segments exchanged.
    pub fn swapped(&self) -> Self {
        TeacherQuery {
            id: self.id,
            first: self.second.clone(),
            second: self.first.clone(),
            weight: self.weight.clone(),
            ground_truth: self.ground_truth.as_ref().map(|g| GroundTruth {
                first: g.second.clone(),
                second: g.first.clone(),
            }),
            created_step: self.created_step,
        }
    }

    /// Drops hidden ground truth, e.g. before showing the query to a human.
    pub fn without_ground_truth(&self) -> Self {
        TeacherQuery {
            ground_truth: None,
            ..self.clone()
        }
    }

    pub fn answer(&self, label: Label) -> PreferenceRecord {
        PreferenceRecord {
            first: self.first.clone(),
            second: self.second.clone(),
            weight: self.weight.clone(),
            label,
        }
    }
}

/// Labels by comparing `w · Σ γ^t r_t` of the two segments.
pub fn scripted_preference(q: &TeacherQuery, cfg: &DiscountConfig) -> Result<Label, TeacherError> {
    let gt = q.ground_truth.as_ref().ok_or(TeacherError::MissingGroundTruth(q.id))?;
    let r0 = q.weight.dot(discounted_return(&q.first, &gt.first, cfg)?.values());
    let r1 = q.weight.dot(discounted_return(&q.second, &gt.second, cfg)?.values());
    Ok(if (r1 - r0).abs() <= TIE_TOLERANCE {
        Label::Indifferent
    } else if r1 > r0 {
        Label::SecondPreferred
    } else {
        Label::FirstPreferred
    })
}

/// Smallest segment length whose truncated returns preserve every order
/// between streams whose weighted returns differ by at least `delta`.
pub fn min_segment_length(delta: f64, cfg: &DiscountConfig, r_max: f64) -> Result<usize, TeacherError> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(TeacherError::BadBound(format!("delta must be positive, got {delta}")));
    }
    if !(r_max.is_finite() && r_max > 0.0) {
        return Err(TeacherError::BadBound(format!("r_max must be positive, got {r_max}")));
    }
    let gamma = cfg.gamma();
    let ratio = delta * (1.0 - gamma) / (2.0 * r_max);
    if ratio >= 1.0 {
        return Ok(1);
    }
    let h = (ratio.ln() / gamma.ln()).ceil();
    Ok((h as usize).max(1))
}

/// A synchronous, deterministic labeler.
pub trait PreferenceOracle {
    fn label(&self, q: &TeacherQuery) -> Result<Label, TeacherError>;
}

impl<F> PreferenceOracle for F
where
    F: Fn(&TeacherQuery) -> Result<Label, TeacherError>,
{
    fn label(&self, q: &TeacherQuery) -> Result<Label, TeacherError> {
        self(q)
    }
}

/// Asynchronous teacher: queries go out, answers come back later or never.
pub trait Teacher: Send {
    fn submit(&mut self, queries: Vec<TeacherQuery>) -> Result<(), TeacherError>;

    /// Labels that arrived since the previous call, in query-id order.
    fn collect(&mut self) -> Result<Vec<PreferenceRecord>, TeacherError>;

    fn name(&self) -> &'static str;
}

#[derive(Clone, Debug)]
pub struct ScriptedTeacher {
    cfg: DiscountConfig,
    answered: Vec<(u64, PreferenceRecord)>,
}

impl ScriptedTeacher {
    pub fn new(cfg: DiscountConfig) -> Self {
        ScriptedTeacher {
            cfg,
            answered: Vec::new(),
        }
    }
}

impl PreferenceOracle for ScriptedTeacher {
    fn label(&self, q: &TeacherQuery) -> Result<Label, TeacherError> {
        scripted_preference(q, &self.cfg)
    }
}

impl Teacher for ScriptedTeacher {
    fn submit(&mut self, queries: Vec<TeacherQuery>) -> Result<(), TeacherError> {
        for q in queries {
            let label = scripted_preference(&q, &self.cfg)?;
            self.answered.push((q.id, q.answer(label)));
        }
        Ok(())
    }

    fn collect(&mut self) -> Result<Vec<PreferenceRecord>, TeacherError> {
        let mut out = std::mem::take(&mut self.answered);
        out.sort_by_key(|(id, _)| *id);
        Ok(out.into_iter().map(|(_, r)| r).collect())
    }

    fn name(&self) -> &'static str {
        "scripted"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyKind {
    Symmetry,
    Consistency,
    Transitivity,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: PropertyKind,
    pub query_ids: Vec<u64>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub queries: usize,
    pub transitivity_checks: usize,
    pub violations: Vec<Violation>,
}

impl PropertyReport {
    pub fn count(&self, kind: PropertyKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn weight_key(w: &Weight) -> Vec<u64> {
    w.values().iter().map(|x| x.to_bits()).collect()
}

/// Audits a teacher for symmetry, consistency and transitivity. Each query
/// is asked three times (as given, swapped, and again); transitivity is
/// checked over every chain a ≻ b ≻ c under one weight whose closing pair
/// (a, c) was also queried.
pub fn teacher_properties_check<T: PreferenceOracle + ?Sized>(teacher: &T, queries: &[TeacherQuery]) -> PropertyReport {
    let mut report = PropertyReport {
        queries: queries.len(),
        ..Default::default()
    };
    // per weight: segment table and strict relation (winner, loser) -> query id
    let mut groups: HashMap<Vec<u64>, (Vec<Segment>, HashMap<(usize, usize), Label>, HashMap<(usize, usize), u64>)> =
        HashMap::new();
    for q in queries {
        let first = teacher.label(q);
        let swapped = teacher.label(&q.swapped());
        let again = teacher.label(q);
        let (first, swapped, again) = match (first, swapped, again) {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => {
                report.violations.push(Violation {
                    kind: PropertyKind::Error,
                    query_ids: vec![q.id],
                    detail: e.to_string(),
                });
                continue;
            }
        };
        if swapped != first.swapped() {
            report.violations.push(Violation {
                kind: PropertyKind::Symmetry,
                query_ids: vec![q.id],
                detail: format!("label {} but swapped label {}", first.value(), swapped.value()),
            });
        }
        if again != first {
            report.violations.push(Violation {
                kind: PropertyKind::Consistency,
                query_ids: vec![q.id],
                detail: format!("label {} then {}", first.value(), again.value()),
            });
        }
        let (segments, relation, ids) = groups.entry(weight_key(&q.weight)).or_default();
        let mut node = |s: &Segment| match segments.iter().position(|x| x == s) {
            Some(i) => i,
            None => {
                segments.push(s.clone());
                segments.len() - 1
            }
        };
        let a = node(&q.first);
        let b = node(&q.second);
        relation.insert((a, b), first);
        relation.insert((b, a), first.swapped());
        ids.insert((a, b), q.id);
        ids.insert((b, a), q.id);
    }

    for (segments, relation, ids) in groups.values() {
        let n = segments.len();
        // prefers[x][y]: x strictly preferred over y
        let prefers = |x: usize, y: usize| relation.get(&(x, y)) == Some(&Label::FirstPreferred);
        for a in 0..n {
            for b in 0..n {
                if a == b || !prefers(a, b) {
                    continue;
                }
                for c in 0..n {
                    if c == a || c == b || !prefers(b, c) {
                        continue;
                    }
                    if let Some(label) = relation.get(&(a, c)) {
                        report.transitivity_checks += 1;
                        if *label != Label::FirstPreferred {
                            report.violations.push(Violation {
                                kind: PropertyKind::Transitivity,
                                query_ids: vec![ids[&(a, b)], ids[&(b, c)], ids[&(a, c)]],
                                detail: format!("a > b and b > c but (a, c) labelled {}", label.value()),
                            });
                        }
                    }
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_weight, State, Step};

    fn seg(states: &[usize]) -> Segment {
        Segment::new(states.iter().map(|s| Step::new(State::Discrete(*s), 0)).collect()).unwrap()
    }

    fn query(id: u64, w: &[f64], r0: Vec<Vec<f64>>, r1: Vec<Vec<f64>>) -> TeacherQuery {
        let n = r0.len();
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (100..100 + n).collect();
        TeacherQuery::new(id, seg(&a), seg(&b), make_weight(w).unwrap())
            .unwrap()
            .with_ground_truth(r0, r1)
    }

    #[test]
    fn identical_segments_are_indifferent() {
        let cfg = DiscountConfig::default();
        let s = seg(&[1, 2]);
        let r = vec![vec![1.0, -1.0], vec![0.0, -1.0]];
        let q = TeacherQuery::new(0, s.clone(), s, make_weight(&[0.5, 0.5]).unwrap())
            .unwrap()
            .with_ground_truth(r.clone(), r);
        assert_eq!(scripted_preference(&q, &cfg).unwrap(), Label::Indifferent);
    }

    #[test]
    fn second_segment_wins_when_its_return_is_higher() {
        let cfg = DiscountConfig::default();
        let q = query(0, &[1.0, 0.0], vec![vec![1.0, -1.0]], vec![vec![2.0, -1.0]]);
        assert_eq!(scripted_preference(&q, &cfg).unwrap(), Label::SecondPreferred);
        assert_eq!(scripted_preference(&q.swapped(), &cfg).unwrap(), Label::FirstPreferred);
    }

    #[test]
    fn equal_time_cost_is_indifferent_under_time_weight() {
        let cfg = DiscountConfig::default();
        let q = query(
            0,
            &[0.0, 1.0],
            vec![vec![0.0, -1.0], vec![0.0, -1.0]],
            vec![vec![8.2, -1.0], vec![0.0, -1.0]],
        );
        assert_eq!(scripted_preference(&q, &cfg).unwrap(), Label::Indifferent);
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let q = TeacherQuery::new(7, seg(&[0]), seg(&[1]), make_weight(&[0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(
            scripted_preference(&q, &DiscountConfig::default()),
            Err(TeacherError::MissingGroundTruth(7))
        );
    }

    #[test]
    fn unequal_segments_are_rejected() {
        let err = TeacherQuery::new(0, seg(&[0]), seg(&[1, 2]), make_weight(&[0.5, 0.5]).unwrap());
        assert!(matches!(err, Err(TeacherError::LengthMismatch { .. })));
    }

    #[test]
    fn min_segment_length_examples() {
        let cfg = DiscountConfig::new(0.99).unwrap();
        assert_eq!(min_segment_length(1.0, &cfg, 1.0).unwrap(), 528);
        assert_eq!(min_segment_length(2.0 / 0.01, &cfg, 1.0).unwrap(), 1);
        assert!(matches!(min_segment_length(0.0, &cfg, 1.0), Err(TeacherError::BadBound(_))));
        assert!(matches!(min_segment_length(-1.0, &cfg, 1.0), Err(TeacherError::BadBound(_))));
        assert!(matches!(min_segment_length(1.0, &cfg, 0.0), Err(TeacherError::BadBound(_))));
    }

    #[test]
    fn always_second_stub_breaks_symmetry() {
        let stub = |_: &TeacherQuery| Ok(Label::SecondPreferred);
        let q = query(3, &[0.5, 0.5], vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]);
        let report = teacher_properties_check(&stub, &[q]);
        assert_eq!(report.count(PropertyKind::Symmetry), 1);
    }

    #[test]
    fn empty_query_list_gives_empty_report() {
        let t = ScriptedTeacher::new(DiscountConfig::default());
        let report = teacher_properties_check(&t, &[]);
        assert!(report.is_clean());
        assert_eq!(report.queries, 0);
    }

    #[test]
    fn cyclic_stub_breaks_transitivity() {
        let a = seg(&[1]);
        let b = seg(&[2]);
        let c = seg(&[3]);
        let w = make_weight(&[0.5, 0.5]).unwrap();
        let qs = vec![
            TeacherQuery::new(0, a.clone(), b.clone(), w.clone()).unwrap(),
            TeacherQuery::new(1, b.clone(), c.clone(), w.clone()).unwrap(),
            TeacherQuery::new(2, c.clone(), a.clone(), w).unwrap(),
        ];
        let first_state = |s: &Segment| s.steps()[0].state.index().unwrap();
        let stub = move |q: &TeacherQuery| {
            let (x, y) = (first_state(&q.first), first_state(&q.second));
            // rock-paper-scissors: 1 beats 2, 2 beats 3, 3 beats 1
            let beats = |p: usize, r: usize| (p % 3) + 1 == r;
            Ok(if beats(x, y) {
                Label::FirstPreferred
            } else {
                Label::SecondPreferred
            })
        };
        let report = teacher_properties_check(&stub, &qs);
        assert_eq!(report.count(PropertyKind::Symmetry), 0);
        assert!(report.count(PropertyKind::Transitivity) > 0);
    }

    #[test]
    fn scripted_teacher_collects_in_id_order() {
        let mut t = ScriptedTeacher::new(DiscountConfig::default());
        let q1 = query(5, &[1.0, 0.0], vec![vec![1.0, 0.0]], vec![vec![0.0, 0.0]]);
        let q0 = query(2, &[1.0, 0.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 0.0]]);
        t.submit(vec![q1, q0]).unwrap();
        let out = t.collect().unwrap();
        assert_eq!(out[0].label, Label::SecondPreferred);
        assert_eq!(out[1].label, Label::FirstPreferred);
        assert!(t.collect().unwrap().is_empty());
    }
}
