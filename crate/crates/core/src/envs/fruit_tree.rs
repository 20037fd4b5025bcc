//! Fruit Tree: walk a full binary tree from the root to a leaf holding a
//! nutrient vector.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_action, EnvError, EnvKind, EnvSpec, Environment, StateSpace, StateView, StepOutcome};
use crate::domain::State;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FtConfig {
    pub depth: usize,
    pub objectives: usize,
    pub leaf_seed: u64,
    pub segment_length: usize,
}

impl FtConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(1..=12).contains(&self.depth) {
            return Err(EnvError::Config("depth must lie in 1..=12".into()));
        }
        if !(2..=6).contains(&self.objectives) {
            return Err(EnvError::Config("objectives must lie in 2..=6".into()));
        }
        if self.segment_length == 0 || self.segment_length > self.depth {
            return Err(EnvError::Config("need 1 <= segment_length <= depth".into()));
        }
        Ok(())
    }

    pub fn internal_nodes(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn leaves(&self) -> usize {
        1 << self.depth
    }
}

/// Seeded nonnegative unit-norm nutrient vectors, one per leaf in heap order.
pub fn leaf_table(cfg: &FtConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.leaf_seed);
    (0..cfg.leaves())
        .map(|_| {
            let raw: Vec<f64> = (0..cfg.objectives).map(|_| rng.random::<f64>() + 1e-6).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            raw.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// One transition from internal node `node`: left child `2i+1`, right `2i+2`.
pub fn ft_step(cfg: &FtConfig, leaves: &[Vec<f64>], node: usize, action: usize) -> Result<StepOutcome, EnvError> {
    check_action(action, 2)?;
    let internal = cfg.internal_nodes();
    if node >= internal {
        return Err(EnvError::InvalidCell(format!("node {node} is not an internal node")));
    }
    let child = 2 * node + 1 + action;
    let terminated = child >= internal;
    let reward = if terminated {
        leaves[child - internal].clone()
    } else {
        vec![0.0; cfg.objectives]
    };
    Ok(StepOutcome {
        next_state: State::Discrete(child),
        reward,
        terminated,
        truncated: false,
    })
}

#[derive(Clone, Debug)]
pub struct FruitTree {
    cfg: FtConfig,
    leaves: Vec<Vec<f64>>,
    spec: EnvSpec,
    node: usize,
    done: bool,
}

impl FruitTree {
    pub fn new(cfg: FtConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let leaves = leaf_table(&cfg);
        let mut scale = vec![0.0f64; cfg.objectives];
        for leaf in &leaves {
            for (s, x) in scale.iter_mut().zip(leaf) {
                *s = s.max(*x);
            }
        }
        let spec = EnvSpec {
            kind: EnvKind::FruitTree,
            m: cfg.objectives,
            state_space: StateSpace::Discrete {
                count: cfg.internal_nodes() + cfg.leaves(),
            },
            action_names: vec!["left".into(), "right".into()],
            action_values: None,
            max_episode_length: cfg.depth,
            segment_length: cfg.segment_length,
            reference: vec![0.0; cfg.objectives],
            r_max: scale.iter().fold(0.0f64, |a, b| a.max(*b)),
            reward_scale: scale,
            grid: None,
        };
        Ok(FruitTree {
            cfg,
            leaves,
            spec,
            node: 0,
            done: false,
        })
    }

    pub fn leaves(&self) -> &[Vec<f64>] {
        &self.leaves
    }

    pub fn config(&self) -> &FtConfig {
        &self.cfg
    }
}

impl Environment for FruitTree {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> State {
        self.node = 0;
        self.done = false;
        State::Discrete(0)
    }

    fn state(&self) -> State {
        State::Discrete(self.node)
    }

    fn set_state(&mut self, state: &State) -> Result<(), EnvError> {
        match state {
            State::Discrete(i) if *i < self.cfg.internal_nodes() => {
                self.node = *i;
                self.done = false;
                Ok(())
            }
            State::Discrete(i) if *i < self.cfg.internal_nodes() + self.cfg.leaves() => {
                Err(EnvError::InvalidCell(format!("node {i} is a leaf")))
            }
            _ => Err(EnvError::ForeignState(state.to_string())),
        }
    }

    fn step(&mut self, action: usize, _rng: &mut dyn RngCore) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let out = ft_step(&self.cfg, &self.leaves, self.node, action)?;
        self.node = out.next_state.index().expect("discrete");
        self.done = out.terminated;
        Ok(out)
    }

    fn describe(&self, state: &State) -> StateView {
        match state {
            State::Discrete(i) => {
                let depth = usize::BITS as usize - 1 - (i + 1).leading_zeros() as usize;
                StateView {
                    label: format!("node {i} (depth {depth})"),
                    cell: None,
                    values: None,
                }
            }
            other => StateView {
                label: other.to_string(),
                cell: None,
                values: None,
            },
        }
    }

    fn clone_box(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}
