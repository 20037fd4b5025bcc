//! Transition replay with reward relabeling, the preference buffer, and
//! recency-windowed query sampling.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PreferenceRecord, Segment, SegmentOrigin, State, Step, Weight};

pub const DEFAULT_CAPACITY: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("buffer is empty")]
    EmptyBuffer,
    #[error("not enough data: need {needed} candidate segments of length {length}, found {found}")]
    InsufficientData { needed: usize, length: usize, found: usize },
    #[error("recency window must lie in (0, 1], got {0}")]
    BadWindow(f64),
    #[error("reward has {actual} components, buffer holds {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: State,
    pub action: usize,
    pub next_state: State,
    pub reward_estimate: Vec<f64>,
    /// Environment reward; never used for learning outside the oracle run,
    /// only for the scripted teacher.
    pub true_reward: Vec<f64>,
    pub weight: Weight,
    pub episode: u64,
    pub step_index: usize,
    pub order: u64,
    pub terminated: bool,
    pub truncated: bool,
}

impl Transition {
    pub fn step(&self) -> Step {
        Step::new(self.state.clone(), self.action)
    }
}

/// FIFO replay buffer. `push` assigns strictly increasing insertion orders.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    next_order: u64,
}

/// A segment cut from the buffer together with its hidden true rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSegment {
    pub segment: Segment,
    pub true_rewards: Vec<Vec<f64>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            next_order: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Stores `t`, evicting the oldest item at capacity. Returns its order.
    pub fn push(&mut self, mut t: Transition) -> Result<u64, ReplayError> {
        if let Some(first) = self.items.front() {
            if first.reward_estimate.len() != t.reward_estimate.len() {
                return Err(ReplayError::DimensionMismatch {
                    expected: first.reward_estimate.len(),
                    actual: t.reward_estimate.len(),
                });
            }
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        t.order = self.next_order;
        self.next_order += 1;
        self.items.push_back(t);
        Ok(self.next_order - 1)
    }

    /// Indices of `batch` transitions drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>, ReplayError> {
        if self.items.is_empty() {
            return Err(ReplayError::EmptyBuffer);
        }
        let n = self.items.len();
        Ok((0..batch).map(|_| rng.random_range(0..n)).collect())
    }

    pub fn sample_minibatch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>, ReplayError> {
        Ok(self.sample_indices(batch, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }

    /// Candidate start indices for length-`h` segments whose start lies in
    /// the most recent `window` fraction of the buffer. With `pad_terminal`,
    /// a slice may run off the end of a terminated episode; the missing
    /// steps become absorbing steps.
    fn segment_starts(&self, h: usize, window: f64, pad_terminal: bool) -> Result<Vec<(usize, usize)>, ReplayError> {
        if !(window > 0.0 && window <= 1.0) {
            return Err(ReplayError::BadWindow(window));
        }
        let n = self.items.len();
        if n == 0 || h == 0 {
            return Ok(Vec::new());
        }
        // run[i]: contiguous same-episode steps starting at i
        let mut run = vec![1usize; n];
        for i in (0..n - 1).rev() {
            let (a, b) = (&self.items[i], &self.items[i + 1]);
            if a.episode == b.episode && a.step_index + 1 == b.step_index && !a.terminated && !a.truncated {
                run[i] = run[i + 1] + 1;
            }
        }
        let recent = ((window * n as f64).ceil() as usize).clamp(1, n);
        let mut starts = Vec::new();
        for i in n - recent..n {
            if run[i] >= h {
                starts.push((i, h));
            } else if pad_terminal && self.items[i + run[i] - 1].terminated {
                starts.push((i, run[i]));
            }
        }
        Ok(starts)
    }

    fn cut(&self, start: usize, real: usize, h: usize) -> SampledSegment {
        let steps: Vec<Step> = (start..start + real).map(|i| self.items[i].step()).collect();
        let first = &self.items[start];
        let segment = Segment::padded(steps, h - real)
            .expect("segments hold at least one step")
            .with_origin(SegmentOrigin {
                episode: first.episode,
                start_step: first.step_index,
                start_order: first.order,
            });
        SampledSegment {
            segment,
            true_rewards: (start..start + real).map(|i| self.items[i].true_reward.clone()).collect(),
        }
    }

    /// `n_s` pairs of distinct length-`h` slices from the recency window.
    /// Slices never cross an episode boundary.
    pub fn sample_query_pairs<R: Rng + ?Sized>(
        &self,
        n_s: usize,
        h: usize,
        window: f64,
        pad_terminal: bool,
        rng: &mut R,
    ) -> Result<Vec<(SampledSegment, SampledSegment)>, ReplayError> {
        let starts = self.segment_starts(h, window, pad_terminal)?;
        if starts.len() < 2 {
            return Err(ReplayError::InsufficientData {
                needed: 2,
                length: h,
                found: starts.len(),
            });
        }
        let mut out = Vec::with_capacity(n_s);
        for _ in 0..n_s {
            let a = rng.random_range(0..starts.len());
            let mut b = rng.random_range(0..starts.len() - 1);
            if b >= a {
                b += 1;
            }
            let (sa, ra) = starts[a];
            let (sb, rb) = starts[b];
            out.push((self.cut(sa, ra, h), self.cut(sb, rb, h)));
        }
        Ok(out)
    }

    /// Rewrites every reward estimate with `f(state, action)`; all other
    /// fields, the size and the order are untouched.
    pub fn relabel_with<F, E>(&mut self, mut f: F) -> Result<(), E>
    where
        F: FnMut(&State, usize) -> Result<Vec<f64>, E>,
    {
        for t in self.items.iter_mut() {
            t.reward_estimate = f(&t.state, t.action)?;
        }
        Ok(())
    }
}

/// Append-only store of answered preferences.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PreferenceBuffer {
    records: Vec<PreferenceRecord>,
}

impl PreferenceBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: PreferenceRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, rs: impl IntoIterator<Item = PreferenceRecord>) {
        self.records.extend(rs);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }
}
