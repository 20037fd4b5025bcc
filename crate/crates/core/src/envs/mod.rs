//! Multi-objective benchmark environments behind one episodic interface.

pub mod config;
pub mod dst;
pub mod energy;
pub mod fruit_tree;
pub mod resource;

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::State;

pub use config::EnvConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown environment '{0}' (expected one of: dst, ft, rg, energy)")]
    Unknown(String),
    #[error("invalid cell: {0}")]
    InvalidCell(String),
    #[error("action {action} out of range ({count} actions)")]
    InvalidAction { action: usize, count: usize },
    #[error("action level {level} exceeds bound {bound}")]
    ActionOutOfRange { level: f64, bound: f64 },
    #[error("episode has ended; call reset")]
    EpisodeOver,
    #[error("state {0} does not belong to this environment")]
    ForeignState(String),
    #[error("environment config: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("state {0} cannot be encoded by this encoder")]
    State(String),
    #[error("action {action} out of range ({count} actions)")]
    Action { action: usize, count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "dst")]
    DeepSeaTreasure,
    #[serde(rename = "ft")]
    FruitTree,
    #[serde(rename = "rg")]
    ResourceGathering,
    #[serde(rename = "energy")]
    Energy,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [
        EnvKind::DeepSeaTreasure,
        EnvKind::FruitTree,
        EnvKind::ResourceGathering,
        EnvKind::Energy,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            EnvKind::DeepSeaTreasure => "dst",
            EnvKind::FruitTree => "ft",
            EnvKind::ResourceGathering => "rg",
            EnvKind::Energy => "energy",
        }
    }

    /// Whether the task is deterministic and small enough to enumerate.
    pub fn is_enumerable(self) -> bool {
        matches!(self, EnvKind::DeepSeaTreasure | EnvKind::FruitTree)
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dst" | "deep-sea-treasure" => Ok(EnvKind::DeepSeaTreasure),
            "ft" | "fruit-tree" => Ok(EnvKind::FruitTree),
            "rg" | "resource-gathering" => Ok(EnvKind::ResourceGathering),
            "energy" | "energy-storage" => Ok(EnvKind::Energy),
            _ => Err(EnvError::Unknown(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpace {
    Discrete { count: usize },
    Box { low: Vec<f64>, high: Vec<f64> },
}

/// Static description of an environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub m: usize,
    pub state_space: StateSpace,
    pub action_names: Vec<String>,
    /// Numeric action levels, for tasks whose discrete actions stand for reals.
    pub action_values: Option<Vec<f64>>,
    pub max_episode_length: usize,
    pub segment_length: usize,
    pub reference: Vec<f64>,
    /// Per-objective bound on |reward|; used to scale bounded reward heads.
    pub reward_scale: Vec<f64>,
    /// Bound on |w · r| for any weight and step.
    pub r_max: f64,
    /// (rows, cols) for grid tasks.
    pub grid: Option<(usize, usize)>,
}

impl EnvSpec {
    pub fn n_actions(&self) -> usize {
        self.action_names.len()
    }

    pub fn n_states(&self) -> Option<usize> {
        match self.state_space {
            StateSpace::Discrete { count } => Some(count),
            StateSpace::Box { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: State,
    pub reward: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
}

/// Human-facing rendering of a state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode. Seeds any exogenous process.
    fn reset(&mut self, seed: u64) -> State;

    fn state(&self) -> State;

    /// Places the environment in `state` mid-episode (elapsed count unchanged).
    fn set_state(&mut self, state: &State) -> Result<(), EnvError>;

    /// Advances one step. Stochastic tasks draw from `rng`.
    fn step(&mut self, action: usize, rng: &mut dyn RngCore) -> Result<StepOutcome, EnvError>;

    fn describe(&self, state: &State) -> StateView;

    fn clone_box(&self) -> Box<dyn Environment>;
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Maps (state, action) to a dense network input: one-hot state and action
/// for enumerated tasks, min-max normalized state plus scaled action level
/// otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEncoder {
    space: StateSpace,
    n_actions: usize,
    action_values: Option<Vec<f64>>,
    include_action: bool,
}

impl StepEncoder {
    pub fn new(spec: &EnvSpec) -> Self {
        StepEncoder {
            space: spec.state_space.clone(),
            n_actions: spec.n_actions(),
            action_values: spec.action_values.clone(),
            include_action: true,
        }
    }

    /// Encodes only a bounded real state; the action is ignored.
    pub fn state_only(low: Vec<f64>, high: Vec<f64>, n_actions: usize) -> Self {
        StepEncoder {
            space: StateSpace::Box { low, high },
            n_actions,
            action_values: None,
            include_action: false,
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.space {
            StateSpace::Discrete { count } => *count,
            StateSpace::Box { low, .. } => low.len(),
        }
    }

    fn action_dim(&self) -> usize {
        if !self.include_action {
            return 0;
        }
        match (&self.space, &self.action_values) {
            (StateSpace::Box { .. }, Some(_)) => 1,
            _ => self.n_actions,
        }
    }

    pub fn dim(&self) -> usize {
        self.state_dim() + self.action_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Writes the state part into `out[..state_dim]`; `out` must be zeroed.
    pub fn encode_state_into(&self, state: &State, out: &mut [f64]) -> Result<(), EncodingError> {
        match (&self.space, state) {
            (StateSpace::Discrete { count }, State::Discrete(i)) if i < count => {
                out[*i] = 1.0;
                Ok(())
            }
            (StateSpace::Box { low, high }, State::Continuous(v)) if v.len() == low.len() => {
                for (k, x) in v.iter().enumerate() {
                    let span = high[k] - low[k];
                    out[k] = if span > 0.0 { (x - low[k]) / span } else { 0.0 };
                }
                Ok(())
            }
            _ => Err(EncodingError::State(state.to_string())),
        }
    }

    /// Writes the full (state, action) encoding into a zeroed `out`.
    pub fn encode_into(&self, state: &State, action: usize, out: &mut [f64]) -> Result<(), EncodingError> {
        if action >= self.n_actions {
            return Err(EncodingError::Action {
                action,
                count: self.n_actions,
            });
        }
        self.encode_state_into(state, out)?;
        if !self.include_action {
            return Ok(());
        }
        let base = self.state_dim();
        match (&self.space, &self.action_values) {
            (StateSpace::Box { .. }, Some(levels)) => {
                let bound = levels.iter().fold(0.0f64, |b, x| b.max(x.abs()));
                out[base] = if bound > 0.0 { levels[action] / bound } else { 0.0 };
            }
            _ => out[base + action] = 1.0,
        }
        Ok(())
    }

    pub fn encode(&self, state: &State, action: usize) -> Result<Vec<f64>, EncodingError> {
        let mut out = vec![0.0; self.dim()];
        self.encode_into(state, action, &mut out)?;
        Ok(out)
    }
}

/// Builds an environment from its bundled default configuration.
pub fn make_env(kind: EnvKind, gamma: f64) -> Result<Box<dyn Environment>, EnvError> {
    EnvConfig::bundled(kind).build(gamma)
}

/// Looks up an environment by name (`dst`, `ft`, `rg`, `energy`).
pub fn make_env_by_name(name: &str, gamma: f64) -> Result<Box<dyn Environment>, EnvError> {
    make_env(name.parse()?, gamma)
}

pub(crate) fn check_action(action: usize, count: usize) -> Result<(), EnvError> {
    if action < count {
        Ok(())
    } else {
        Err(EnvError::InvalidAction { action, count })
    }
}

pub(crate) fn grid_actions() -> Vec<String> {
    ["up", "down", "left", "right"].iter().map(|s| s.to_string()).collect()
}

/// Moves (row, col) one cell in grid-action direction, clipped at borders.
pub(crate) fn grid_move(pos: (usize, usize), action: usize, rows: usize, cols: usize) -> (usize, usize) {
    let (r, c) = pos;
    match action {
        0 => (r.saturating_sub(1), c),
        1 => ((r + 1).min(rows - 1), c),
        2 => (r, c.saturating_sub(1)),
        _ => (r, (c + 1).min(cols - 1)),
    }
}
