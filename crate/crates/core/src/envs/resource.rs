//! Resource Gathering: fetch gold and gems past enemies and bring them home.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{check_action, grid_actions, grid_move, EnvError, EnvKind, EnvSpec, Environment, StateSpace, StateView, StepOutcome};
use crate::domain::State;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RgConfig {
    pub size: usize,
    pub home: [usize; 2],
    pub gold: [usize; 2],
    pub gem: [usize; 2],
    pub enemies: Vec<[usize; 2]>,
    pub death_probability: f64,
    pub max_episode_length: usize,
    pub segment_length: usize,
}

impl RgConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: &str| Err(EnvError::Config(msg.to_string()));
        if self.size < 2 {
            return bad("size must be at least 2");
        }
        let inside = |p: &[usize; 2]| p[0] < self.size && p[1] < self.size;
        if !inside(&self.home) || !inside(&self.gold) || !inside(&self.gem) || !self.enemies.iter().all(inside) {
            return bad("all positions must lie inside the grid");
        }
        let specials = [self.home, self.gold, self.gem];
        if specials[0] == specials[1] || specials[0] == specials[2] || specials[1] == specials[2] {
            return bad("home, gold and gem must be distinct");
        }
        if self.enemies.iter().any(|e| specials.contains(e)) {
            return bad("enemies cannot share a cell with home, gold or gem");
        }
        if !(0.0..=1.0).contains(&self.death_probability) {
            return bad("death_probability must lie in [0, 1]");
        }
        if self.segment_length == 0 || self.segment_length > self.max_episode_length {
            return bad("need 1 <= segment_length <= max_episode_length");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RgState {
    pub pos: (usize, usize),
    pub gold: bool,
    pub gem: bool,
}

impl RgState {
    pub fn index(&self, size: usize) -> usize {
        (self.pos.0 * size + self.pos.1) * 4 + 2 * self.gold as usize + self.gem as usize
    }

    pub fn from_index(i: usize, size: usize) -> Option<Self> {
        if i >= size * size * 4 {
            return None;
        }
        let pos = i / 4;
        Some(RgState {
            pos: (pos / size, pos % size),
            gold: i & 2 != 0,
            gem: i & 1 != 0,
        })
    }
}

/// One transition. `draw` is a uniform number in [0, 1) deciding whether an
/// enemy encounter is fatal.
pub fn rg_step(cfg: &RgConfig, state: RgState, action: usize, draw: f64) -> Result<(RgState, StepOutcome), EnvError> {
    check_action(action, 4)?;
    let (r, c) = state.pos;
    if r >= cfg.size || c >= cfg.size {
        return Err(EnvError::InvalidCell(format!("({r}, {c})")));
    }
    let pos = grid_move(state.pos, action, cfg.size, cfg.size);
    let here = [pos.0, pos.1];
    let mut next = RgState { pos, ..state };
    let outcome = |next: RgState, reward: Vec<f64>, terminated: bool| StepOutcome {
        next_state: State::Discrete(next.index(cfg.size)),
        reward,
        terminated,
        truncated: false,
    };
    if cfg.enemies.contains(&here) && draw < cfg.death_probability {
        next.gold = false;
        next.gem = false;
        return Ok((next, outcome(next, vec![-1.0, 0.0, 0.0], true)));
    }
    if here == cfg.gold {
        next.gold = true;
    }
    if here == cfg.gem {
        next.gem = true;
    }
    if here == cfg.home && (next.gold || next.gem) {
        let reward = vec![0.0, next.gold as u8 as f64, next.gem as u8 as f64];
        return Ok((next, outcome(next, reward, true)));
    }
    Ok((next, outcome(next, vec![0.0; 3], false)))
}

#[derive(Clone, Debug)]
pub struct ResourceGathering {
    cfg: RgConfig,
    spec: EnvSpec,
    state: RgState,
    elapsed: usize,
    done: bool,
}

impl ResourceGathering {
    pub fn new(cfg: RgConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let spec = EnvSpec {
            kind: EnvKind::ResourceGathering,
            m: 3,
            state_space: StateSpace::Discrete {
                count: cfg.size * cfg.size * 4,
            },
            action_names: grid_actions(),
            action_values: None,
            max_episode_length: cfg.max_episode_length,
            segment_length: cfg.segment_length,
            reference: vec![-1.0, 0.0, 0.0],
            reward_scale: vec![1.0, 1.0, 1.0],
            r_max: 1.0,
            grid: Some((cfg.size, cfg.size)),
        };
        let state = RgState {
            pos: (cfg.home[0], cfg.home[1]),
            gold: false,
            gem: false,
        };
        Ok(ResourceGathering {
            cfg,
            spec,
            state,
            elapsed: 0,
            done: false,
        })
    }
}

impl Environment for ResourceGathering {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> State {
        self.state = RgState {
            pos: (self.cfg.home[0], self.cfg.home[1]),
            gold: false,
            gem: false,
        };
        self.elapsed = 0;
        self.done = false;
        self.state()
    }

    fn state(&self) -> State {
        State::Discrete(self.state.index(self.cfg.size))
    }

    fn set_state(&mut self, state: &State) -> Result<(), EnvError> {
        let s = state
            .index()
            .and_then(|i| RgState::from_index(i, self.cfg.size))
            .ok_or_else(|| EnvError::ForeignState(state.to_string()))?;
        self.state = s;
        self.done = false;
        Ok(())
    }

    fn step(&mut self, action: usize, rng: &mut dyn RngCore) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        check_action(action, 4)?;
        let draw: f64 = rng.random();
        let (next, mut out) = rg_step(&self.cfg, self.state, action, draw)?;
        self.state = next;
        self.elapsed += 1;
        out.truncated = !out.terminated && self.elapsed >= self.cfg.max_episode_length;
        self.done = out.terminated || out.truncated;
        Ok(out)
    }

    fn describe(&self, state: &State) -> StateView {
        match state.index().and_then(|i| RgState::from_index(i, self.cfg.size)) {
            Some(s) => StateView {
                label: format!(
                    "row {}, col {}{}{}",
                    s.pos.0,
                    s.pos.1,
                    if s.gold { ", gold" } else { "" },
                    if s.gem { ", gem" } else { "" }
                ),
                cell: Some([s.pos.0, s.pos.1]),
                values: None,
            },
            None => StateView {
                label: state.to_string(),
                cell: None,
                values: None,
            },
        }
    }

    fn clone_box(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}
