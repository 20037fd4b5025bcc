//! Envelope multi-objective Q-learning: weight-conditioned Q functions, the
//! envelope filter and backup, TD updates and greedy action selection.

pub mod trainer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainError, State, Weight, WeightGrid};
use crate::envs::{EncodingError, EnvSpec, StepEncoder};
use crate::nn::{Adam, Head, Mlp, Tape};
use crate::replay::Transition;

pub use trainer::{
    build_q, evaluate, run_eql_oracle, run_pbmorl, MetricRecord, NoHooks, QRealization, RunArtifacts, RunEvent, RunHooks, RunStatus,
    TrainError, TrainerConfig,
};

/// Weight of the component-wise squared error in the TD loss.
pub const AUX_WEIGHT: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EqlError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("tabular Q needs a discrete state, got {0}")]
    NotDiscrete(String),
    #[error("state index {index} out of range ({count} states)")]
    StateOutOfRange { index: usize, count: usize },
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("Q functions have different shapes")]
    ShapeMismatch,
}

/// Q over (discrete state, grid weight, action). Weights snap to the
/// nearest grid point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TabularQ {
    n_states: usize,
    n_actions: usize,
    m: usize,
    resolution: usize,
    table: Vec<f64>,
    #[serde(skip)]
    grid: Option<WeightGrid>,
}

impl TabularQ {
    pub fn new(n_states: usize, n_actions: usize, grid: WeightGrid) -> Self {
        let m = grid.m();
        TabularQ {
            n_states,
            n_actions,
            m,
            resolution: grid.resolution(),
            table: vec![0.0; n_states * grid.len() * n_actions * m],
            grid: Some(grid),
        }
    }

    /// Every entry starts at `init`, one value per objective.
    pub fn with_init(n_states: usize, n_actions: usize, grid: WeightGrid, init: &[f64]) -> Self {
        let mut q = TabularQ::new(n_states, n_actions, grid);
        assert_eq!(init.len(), q.m, "one initial value per objective");
        for chunk in q.table.chunks_exact_mut(q.m) {
            chunk.copy_from_slice(init);
        }
        q
    }

    pub fn grid(&self) -> &WeightGrid {
        self.grid.as_ref().expect("grid restored after deserialization")
    }

    /// Rebuilds the lookup grid after deserialization.
    pub fn restore_grid(&mut self) -> Result<(), DomainError> {
        if self.grid.is_none() {
            self.grid = Some(WeightGrid::new(self.m, self.resolution)?);
        }
        Ok(())
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    fn state_index(&self, state: &State) -> Result<usize, EqlError> {
        match state {
            State::Discrete(i) if *i < self.n_states => Ok(*i),
            State::Discrete(i) => Err(EqlError::StateOutOfRange {
                index: *i,
                count: self.n_states,
            }),
            other => Err(EqlError::NotDiscrete(other.to_string())),
        }
    }

    /// Offset of the `n_actions · m` block for (state, grid point).
    #[inline]
    pub fn block(&self, s: usize, wi: usize) -> usize {
        (s * self.grid().len() + wi) * self.n_actions * self.m
    }

    pub fn set(&mut self, s: usize, wi: usize, a: usize, v: &[f64]) {
        let off = self.block(s, wi) + a * self.m;
        self.table[off..off + self.m].copy_from_slice(v);
    }
}

/// Q as a feedforward net over (state encoding, weight) with `|A| · m`
/// outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkQ {
    encoder: StepEncoder,
    net: Mlp,
    opt: Adam,
    n_actions: usize,
    m: usize,
}

impl NetworkQ {
    pub fn new(spec: &EnvSpec, hidden: &[usize], lr: f64, seed: u64) -> Self {
        let encoder = StepEncoder::new(spec);
        let mut sizes = vec![encoder.state_dim() + spec.m];
        sizes.extend(hidden);
        sizes.push(spec.n_actions() * spec.m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&sizes, Head::Linear, false, &mut rng);
        NetworkQ {
            opt: Adam::new(net.n_params(), lr),
            encoder,
            net,
            n_actions: spec.n_actions(),
            m: spec.m,
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn input(&self, state: &State, w: &Weight) -> Result<Vec<f64>, EqlError> {
        let sd = self.encoder.state_dim();
        let mut x = vec![0.0; sd + self.m];
        self.encoder.encode_state_into(state, &mut x[..sd])?;
        x[sd..].copy_from_slice(w.values());
        Ok(x)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "realization", rename_all = "snake_case")]
pub enum QFunction {
    Tabular(TabularQ),
    Network(NetworkQ),
}

impl QFunction {
    pub fn m(&self) -> usize {
        match self {
            QFunction::Tabular(t) => t.m,
            QFunction::Network(n) => n.m,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            QFunction::Tabular(t) => t.n_actions,
            QFunction::Network(n) => n.n_actions,
        }
    }

    /// `Q(state, a, w)` for every action, flattened as `[a][k]`.
    pub fn values(&self, state: &State, w: &Weight) -> Result<Vec<f64>, EqlError> {
        match self {
            QFunction::Tabular(t) => {
                let s = t.state_index(state)?;
                let off = t.block(s, t.grid().nearest(w));
                Ok(t.table[off..off + t.n_actions * t.m].to_vec())
            }
            QFunction::Network(n) => Ok(n.net.forward(&n.input(state, w)?)),
        }
    }

    pub fn value(&self, state: &State, action: usize, w: &Weight) -> Result<Vec<f64>, EqlError> {
        let m = self.m();
        Ok(self.values(state, w)?[action * m..(action + 1) * m].to_vec())
    }

    /// Copies `tau · self + (1 - tau) · target` into `target`.
    pub fn soft_update_into(&self, target: &mut QFunction, tau: f64) -> Result<(), EqlError> {
        let (src, dst): (&[f64], &mut [f64]) = match (self, target) {
            (QFunction::Tabular(a), QFunction::Tabular(b)) => (&a.table, &mut b.table),
            (QFunction::Network(a), QFunction::Network(b)) => (a.net.params(), b.net.params_mut()),
            _ => return Err(EqlError::ShapeMismatch),
        };
        if src.len() != dst.len() {
            return Err(EqlError::ShapeMismatch);
        }
        blend(src, dst, tau);
        Ok(())
    }
}

fn blend(src: &[f64], dst: &mut [f64], tau: f64) {
    if tau >= 1.0 {
        dst.copy_from_slice(src);
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = tau * s + (1.0 - tau) * *d;
        }
    }
}

fn argmax_dot(values: &[f64], m: usize, w: &Weight) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (a, q) in values.chunks_exact(m).enumerate() {
        let v = w.dot(q);
        if v > best.1 {
            best = (a, v);
        }
    }
    best
}

/// `argmax_a w · Q(state, a, w)`, lowest index on ties.
pub fn greedy_action(q: &QFunction, state: &State, w: &Weight) -> Result<usize, EqlError> {
    Ok(argmax_dot(&q.values(state, w)?, q.m(), w).0)
}

/// The Q vector maximizing `w · Q(state, a, w')` over actions `a` and
/// candidate weights `w'`. Ties go to the lowest action, then the lowest
/// candidate index.
pub fn envelope_filter(q: &QFunction, state: &State, w: &Weight, samples: &[Weight]) -> Result<Vec<f64>, EqlError> {
    assert!(!samples.is_empty(), "envelope filter needs candidate weights");
    let m = q.m();
    let per_sample: Vec<Vec<f64>> = samples.iter().map(|ws| q.values(state, ws)).collect::<Result<_, _>>()?;
    let mut best: Option<(f64, usize, usize)> = None;
    for a in 0..q.n_actions() {
        for (j, vals) in per_sample.iter().enumerate() {
            let v = w.dot(&vals[a * m..(a + 1) * m]);
            if best.is_none_or(|(b, _, _)| v > b) {
                best = Some((v, a, j));
            }
        }
    }
    let (_, a, j) = best.expect("at least one candidate");
    Ok(per_sample[j][a * m..(a + 1) * m].to_vec())
}

/// `r̂ + γ · H Q_target(s', w)`; terminal transitions bootstrap nothing.
pub fn envelope_backup(
    target: &QFunction,
    t: &Transition,
    w: &Weight,
    gamma: f64,
    samples: &[Weight],
) -> Result<Vec<f64>, EqlError> {
    let mut y = t.reward_estimate.clone();
    if !t.terminated && gamma != 0.0 {
        let h = envelope_filter(target, &t.next_state, w, samples)?;
        for (yk, hk) in y.iter_mut().zip(&h) {
            *yk += gamma * hk;
        }
    }
    Ok(y)
}

/// `sup |w · (Q1 - Q2)|` over grid weights, states and actions of two
/// tabular functions.
pub fn q_distance(q1: &TabularQ, q2: &TabularQ) -> Result<f64, EqlError> {
    if q1.table.len() != q2.table.len() || q1.m != q2.m {
        return Err(EqlError::ShapeMismatch);
    }
    let grid = q1.grid();
    let mut sup = 0.0f64;
    for s in 0..q1.n_states {
        for (wi, w) in grid.points().iter().enumerate() {
            let off = q1.block(s, wi);
            for a in 0..q1.n_actions {
                let o = off + a * q1.m;
                let diff: Vec<f64> = (0..q1.m).map(|k| q1.table[o + k] - q2.table[o + k]).collect();
                sup = sup.max(w.dot(&diff).abs());
            }
        }
    }
    Ok(sup)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdConfig {
    pub gamma: f64,
    /// Step size of the tabular update `Q ← Q + α (y − Q)`.
    pub tabular_lr: f64,
    pub tau: f64,
}

/// One transition paired with the weight it is updated under.
#[derive(Clone, Debug)]
pub struct TdItem<'a> {
    pub transition: &'a Transition,
    pub weight: Weight,
}

/// One TD update. Each item's filter candidates are its own weight followed
/// by `shared`. With `target = None` the pre-step online function serves as
/// target (the `τ = 1` case); otherwise `target` is soft-updated after the
/// step. Returns `mean |w · δ| + AUX_WEIGHT · mean δ²`, `δ = Q − y`.
pub fn td_step(
    q: &mut QFunction,
    target: Option<&mut QFunction>,
    batch: &[TdItem<'_>],
    shared: &[Weight],
    cfg: &TdConfig,
) -> Result<f64, EqlError> {
    if batch.is_empty() {
        return Err(EqlError::EmptyBatch);
    }
    let m = q.m();
    if let QFunction::Tabular(t) = q {
        return tabular_td_step(t, target, batch, shared, cfg);
    }
    let mut candidates: Vec<Weight> = Vec::with_capacity(shared.len() + 1);
    let mut targets = Vec::with_capacity(batch.len());
    {
        let tq: &QFunction = match &target {
            Some(t) => t,
            None => q,
        };
        for item in batch {
            candidates.clear();
            candidates.push(item.weight.clone());
            candidates.extend_from_slice(shared);
            targets.push(envelope_backup(tq, item.transition, &item.weight, cfg.gamma, &candidates)?);
        }
    }
    let n = batch.len() as f64;
    let mut abs_term = 0.0;
    let mut sq_term = 0.0;
    match q {
        QFunction::Tabular(_) => unreachable!("handled above"),
        QFunction::Network(nq) => {
            let mut grad = vec![0.0; nq.net.n_params()];
            let mut tape = Tape::default();
            let mut g_out = vec![0.0; nq.n_actions * m];
            for (item, y) in batch.iter().zip(&targets) {
                let x = nq.input(&item.transition.state, &item.weight)?;
                nq.net.forward_tape(&x, &mut tape);
                let a = item.transition.action;
                let out = tape.output();
                let delta: Vec<f64> = (0..m).map(|k| out[a * m + k] - y[k]).collect();
                let wd = item.weight.dot(&delta);
                abs_term += wd.abs();
                sq_term += delta.iter().map(|d| d * d).sum::<f64>();
                g_out.iter_mut().for_each(|g| *g = 0.0);
                let sign = if wd > 0.0 {
                    1.0
                } else if wd < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                for k in 0..m {
                    g_out[a * m + k] = sign * item.weight.values()[k] / n + 2.0 * AUX_WEIGHT * delta[k] / (n * m as f64);
                }
                nq.net.backward(&tape, &g_out, &mut grad);
            }
            nq.opt.step(nq.net.params_mut(), &grad);
        }
    }
    if let Some(t) = target {
        q.soft_update_into(t, cfg.tau)?;
    }
    Ok(abs_term / n + AUX_WEIGHT * sq_term / (n * m as f64))
}

/// Tabular `td_step`: candidate grid cells are resolved once, the filter
/// reads the table in place, and every target is computed before any cell
/// moves by `α (y − Q)`.
fn tabular_td_step(
    t: &mut TabularQ,
    target: Option<&mut QFunction>,
    batch: &[TdItem<'_>],
    shared: &[Weight],
    cfg: &TdConfig,
) -> Result<f64, EqlError> {
    let m = t.m;
    let n_actions = t.n_actions;
    let shared_idx: Vec<usize> = shared.iter().map(|w| t.grid().nearest(w)).collect();
    let mut abs_term = 0.0;
    let mut sq_term = 0.0;
    let mut writes: Vec<(usize, Vec<f64>)> = Vec::with_capacity(batch.len());
    {
        let tt: &TabularQ = match &target {
            Some(QFunction::Tabular(x)) => x,
            Some(_) => return Err(EqlError::ShapeMismatch),
            None => t,
        };
        if tt.table.len() != t.table.len() {
            return Err(EqlError::ShapeMismatch);
        }
        for item in batch {
            let tr = item.transition;
            let w = &item.weight;
            let own = t.grid().nearest(w);
            let s = t.state_index(&tr.state)?;
            let off = t.block(s, own) + tr.action * m;
            let mut y = tr.reward_estimate.clone();
            if !tr.terminated && cfg.gamma != 0.0 {
                let s2 = tt.state_index(&tr.next_state)?;
                let mut best = (f64::NEG_INFINITY, 0usize);
                for a in 0..n_actions {
                    for &wi in std::iter::once(&own).chain(&shared_idx) {
                        let o = tt.block(s2, wi) + a * m;
                        let v = w.dot(&tt.table[o..o + m]);
                        if v > best.0 {
                            best = (v, o);
                        }
                    }
                }
                for (yk, hk) in y.iter_mut().zip(&tt.table[best.1..best.1 + m]) {
                    *yk += cfg.gamma * hk;
                }
            }
            let mut wd = 0.0;
            for k in 0..m {
                let d = t.table[off + k] - y[k];
                wd += w.values()[k] * d;
                sq_term += d * d;
            }
            abs_term += wd.abs();
            writes.push((off, y));
        }
    }
    for (off, y) in writes {
        for k in 0..m {
            let cur = t.table[off + k];
            t.table[off + k] = cur + cfg.tabular_lr * (y[k] - cur);
        }
    }
    if let Some(QFunction::Tabular(tq)) = target {
        blend(&t.table, &mut tq.table, cfg.tau);
    }
    let n = batch.len() as f64;
    Ok(abs_term / n + AUX_WEIGHT * sq_term / (n * m as f64))
}

/// Uniform simplex weight snapped to a grid point when a grid is given.
pub fn draw_weight<R: Rng + ?Sized>(rng: &mut R, m: usize, grid: Option<&WeightGrid>) -> Weight {
    let w = crate::domain::sample_weight(rng, m);
    match grid {
        Some(g) => g.point(g.nearest(&w)).clone(),
        None => w,
    }
}
