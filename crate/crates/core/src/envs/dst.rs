//! Deep Sea Treasure: a submarine trades treasure value against travel time.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_action, grid_actions, grid_move, EnvError, EnvKind, EnvSpec, Environment, StateSpace, StateView, StepOutcome};
use crate::domain::State;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Treasure {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DstConfig {
    pub rows: usize,
    pub cols: usize,
    pub start: [usize; 2],
    pub max_episode_length: usize,
    pub segment_length: usize,
    pub treasures: Vec<Treasure>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Cell {
    Water,
    Treasure(f64),
    Seabed,
}

impl DstConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::Config(msg));
        if self.rows == 0 || self.cols == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.treasures.is_empty() {
            return bad("at least one treasure is required".into());
        }
        if self.segment_length == 0 || self.segment_length > self.max_episode_length {
            return bad("need 1 <= segment_length <= max_episode_length".into());
        }
        for (i, t) in self.treasures.iter().enumerate() {
            if t.row >= self.rows || t.col >= self.cols {
                return bad(format!("treasure {i} lies outside the grid"));
            }
            if !(t.value.is_finite() && t.value > 0.0) {
                return bad(format!("treasure {i} must have a positive value"));
            }
            if self.treasures[..i].iter().any(|u| u.col == t.col) {
                return bad(format!("treasure {i} shares a column with another treasure"));
            }
        }
        let layout = Layout::new(self);
        if layout.cell(self.start[0], self.start[1]) != Cell::Water {
            return bad("start cell must be water".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layout {
    rows: usize,
    cols: usize,
    cells: Vec<Cell>,
}

impl Layout {
    fn new(cfg: &DstConfig) -> Self {
        let mut cells = vec![Cell::Water; cfg.rows * cfg.cols];
        for t in &cfg.treasures {
            cells[t.row * cfg.cols + t.col] = Cell::Treasure(t.value);
            for r in t.row + 1..cfg.rows {
                cells[r * cfg.cols + t.col] = Cell::Seabed;
            }
        }
        Layout {
            rows: cfg.rows,
            cols: cfg.cols,
            cells,
        }
    }

    fn cell(&self, r: usize, c: usize) -> Cell {
        self.cells[r * self.cols + c]
    }
}

/// One transition of the grid dynamics from water cell `pos`.
pub fn dst_step(cfg: &DstConfig, pos: (usize, usize), action: usize) -> Result<((usize, usize), StepOutcome), EnvError> {
    check_action(action, 4)?;
    let layout = Layout::new(cfg);
    step_in(&layout, pos, action)
}

fn step_in(layout: &Layout, pos: (usize, usize), action: usize) -> Result<((usize, usize), StepOutcome), EnvError> {
    let (r, c) = pos;
    if r >= layout.rows || c >= layout.cols || layout.cell(r, c) != Cell::Water {
        return Err(EnvError::InvalidCell(format!("({r}, {c})")));
    }
    let mut next = grid_move(pos, action, layout.rows, layout.cols);
    if layout.cell(next.0, next.1) == Cell::Seabed {
        next = pos;
    }
    let (value, terminated) = match layout.cell(next.0, next.1) {
        Cell::Treasure(v) => (v, true),
        _ => (0.0, false),
    };
    Ok((
        next,
        StepOutcome {
            next_state: State::Discrete(next.0 * layout.cols + next.1),
            reward: vec![value, -1.0],
            terminated,
            truncated: false,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct DeepSeaTreasure {
    cfg: DstConfig,
    layout: Layout,
    spec: EnvSpec,
    pos: (usize, usize),
    elapsed: usize,
    done: bool,
}

impl DeepSeaTreasure {
    pub fn new(cfg: DstConfig, gamma: f64) -> Result<Self, EnvError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let max_value = cfg.treasures.iter().fold(0.0f64, |a, t| a.max(t.value));
        let horizon = cfg.max_episode_length as i32;
        let spec = EnvSpec {
            kind: EnvKind::DeepSeaTreasure,
            m: 2,
            state_space: StateSpace::Discrete {
                count: cfg.rows * cfg.cols,
            },
            action_names: grid_actions(),
            action_values: None,
            max_episode_length: cfg.max_episode_length,
            segment_length: cfg.segment_length,
            reference: vec![0.0, -(1.0 - gamma.powi(horizon)) / (1.0 - gamma)],
            reward_scale: vec![max_value, 1.0],
            r_max: max_value.max(1.0),
            grid: Some((cfg.rows, cfg.cols)),
        };
        let pos = (cfg.start[0], cfg.start[1]);
        Ok(DeepSeaTreasure {
            cfg,
            layout,
            spec,
            pos,
            elapsed: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &DstConfig {
        &self.cfg
    }

    fn coords(&self, state: &State) -> Option<(usize, usize)> {
        match state {
            State::Discrete(i) if *i < self.layout.rows * self.layout.cols => {
                Some((i / self.layout.cols, i % self.layout.cols))
            }
            _ => None,
        }
    }
}

impl Environment for DeepSeaTreasure {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> State {
        self.pos = (self.cfg.start[0], self.cfg.start[1]);
        self.elapsed = 0;
        self.done = false;
        self.state()
    }

    fn state(&self) -> State {
        State::Discrete(self.pos.0 * self.layout.cols + self.pos.1)
    }

    fn set_state(&mut self, state: &State) -> Result<(), EnvError> {
        let (r, c) = self
            .coords(state)
            .ok_or_else(|| EnvError::ForeignState(state.to_string()))?;
        if self.layout.cell(r, c) != Cell::Water {
            return Err(EnvError::InvalidCell(format!("({r}, {c})")));
        }
        self.pos = (r, c);
        self.done = false;
        Ok(())
    }

    fn step(&mut self, action: usize, _rng: &mut dyn RngCore) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        check_action(action, 4)?;
        let (next, mut out) = step_in(&self.layout, self.pos, action)?;
        self.pos = next;
        self.elapsed += 1;
        out.truncated = !out.terminated && self.elapsed >= self.cfg.max_episode_length;
        self.done = out.terminated || out.truncated;
        Ok(out)
    }

    fn describe(&self, state: &State) -> StateView {
        match self.coords(state) {
            Some((r, c)) => StateView {
                label: format!("row {r}, col {c}"),
                cell: Some([r, c]),
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
