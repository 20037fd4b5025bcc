//! Energy storage: schedule battery charge/discharge against renewable
//! supply, demand and price.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_action, EnvError, EnvKind, EnvSpec, Environment, StateSpace, StateView, StepOutcome};
use crate::domain::State;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkConfig {
    pub min: f64,
    pub max: f64,
    pub step: f64,
    pub initial: f64,
}

impl WalkConfig {
    fn validate(&self, name: &str) -> Result<(), EnvError> {
        let ok = self.min >= 0.0
            && self.min <= self.max
            && self.step >= 0.0
            && (self.min..=self.max).contains(&self.initial)
            && [self.min, self.max, self.step, self.initial].iter().all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(EnvError::Config(format!(
                "{name}: need 0 <= min <= initial <= max and step >= 0"
            )))
        }
    }

    /// `len` values of a bounded random walk starting at `initial`.
    pub fn trajectory(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(len);
        let mut x = self.initial;
        for _ in 0..len {
            out.push(x);
            let delta = if self.step > 0.0 {
                rng.random_range(-self.step..=self.step)
            } else {
                0.0
            };
            x = (x + delta).clamp(self.min, self.max);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub storage_max: f64,
    pub initial_storage: f64,
    pub action_levels: Vec<f64>,
    pub action_bound: f64,
    pub horizon: usize,
    pub segment_length: usize,
    pub renewable: WalkConfig,
    pub demand: WalkConfig,
    pub price: WalkConfig,
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: &str| Err(EnvError::Config(msg.to_string()));
        if !(self.storage_max > 0.0) || !(0.0..=self.storage_max).contains(&self.initial_storage) {
            return bad("need storage_max > 0 and 0 <= initial_storage <= storage_max");
        }
        if self.action_levels.len() < 2 {
            return bad("need at least two action levels");
        }
        if self.action_levels.iter().any(|a| !a.is_finite() || a.abs() > self.action_bound) {
            return bad("every action level must satisfy |a| <= action_bound");
        }
        if self.segment_length == 0 || self.segment_length > self.horizon {
            return bad("need 1 <= segment_length <= horizon");
        }
        self.renewable.validate("renewable")?;
        self.demand.validate("demand")?;
        self.price.validate("price")?;
        Ok(())
    }

    /// Largest possible purchase cost in one step.
    pub fn max_step_cost(&self) -> f64 {
        self.price.max * (self.demand.max + self.action_bound)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyState {
    pub storage: f64,
    pub renewable: f64,
    pub demand: f64,
    pub price: f64,
}

impl EnergyState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.storage, self.renewable, self.demand, self.price]
    }

    pub fn from_slice(v: &[f64]) -> Option<Self> {
        match v {
            [storage, renewable, demand, price] => Some(EnergyState {
                storage: *storage,
                renewable: *renewable,
                demand: *demand,
                price: *price,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyFlows {
    pub g_charge: f64,
    pub g_demand: f64,
    pub reward: [f64; 2],
    pub next_storage: f64,
}

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

/// Grid purchases, reward and storage update for discharge level `a`
/// (negative `a` charges).
pub fn energy_step(cfg: &EnergyConfig, s: &EnergyState, a: f64) -> Result<EnergyFlows, EnvError> {
    if !a.is_finite() || a.abs() > cfg.action_bound {
        return Err(EnvError::ActionOutOfRange {
            level: a,
            bound: cfg.action_bound,
        });
    }
    let g_charge = if a < 0.0 {
        pos(-a - pos(s.renewable - s.demand))
    } else {
        pos(a - s.storage)
    };
    let g_demand = pos(pos(s.demand - s.renewable) - pos(a));
    let r1 = -s.price * (g_demand + g_charge);
    let r2 = if a > 0.0 && s.storage > 0.0 { -1.0 } else { 0.0 };
    Ok(EnergyFlows {
        g_charge,
        g_demand,
        reward: [r1, r2],
        next_storage: pos(s.storage - a).min(cfg.storage_max),
    })
}

#[derive(Clone, Debug)]
pub struct EnergyStorage {
    cfg: EnergyConfig,
    spec: EnvSpec,
    renewable: Vec<f64>,
    demand: Vec<f64>,
    price: Vec<f64>,
    current: EnergyState,
    elapsed: usize,
    done: bool,
}

impl EnergyStorage {
    pub fn new(cfg: EnergyConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let worst = cfg.max_step_cost();
        let spec = EnvSpec {
            kind: EnvKind::Energy,
            m: 2,
            state_space: StateSpace::Box {
                low: vec![0.0, cfg.renewable.min, cfg.demand.min, cfg.price.min],
                high: vec![cfg.storage_max, cfg.renewable.max, cfg.demand.max, cfg.price.max],
            },
            action_names: cfg.action_levels.iter().map(|a| format!("{a:+}")).collect(),
            action_values: Some(cfg.action_levels.clone()),
            max_episode_length: cfg.horizon,
            segment_length: cfg.segment_length,
            reference: vec![-(cfg.horizon as f64) * worst, -(cfg.horizon as f64)],
            reward_scale: vec![worst, 1.0],
            r_max: worst.max(1.0),
            grid: None,
        };
        let mut env = EnergyStorage {
            current: EnergyState {
                storage: cfg.initial_storage,
                renewable: cfg.renewable.initial,
                demand: cfg.demand.initial,
                price: cfg.price.initial,
            },
            cfg,
            spec,
            renewable: Vec::new(),
            demand: Vec::new(),
            price: Vec::new(),
            elapsed: 0,
            done: false,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &EnergyConfig {
        &self.cfg
    }

    /// The seeded exogenous (renewable, demand, price) series of this episode.
    pub fn exogenous(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.renewable, &self.demand, &self.price)
    }

    pub fn current(&self) -> EnergyState {
        self.current
    }
}

impl Environment for EnergyStorage {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> State {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = self.cfg.horizon + 1;
        self.renewable = self.cfg.renewable.trajectory(len, &mut rng);
        self.demand = self.cfg.demand.trajectory(len, &mut rng);
        self.price = self.cfg.price.trajectory(len, &mut rng);
        self.current = EnergyState {
            storage: self.cfg.initial_storage,
            renewable: self.renewable[0],
            demand: self.demand[0],
            price: self.price[0],
        };
        self.elapsed = 0;
        self.done = false;
        self.state()
    }

    fn state(&self) -> State {
        State::Continuous(self.current.to_vec())
    }

    fn set_state(&mut self, state: &State) -> Result<(), EnvError> {
        let s = match state {
            State::Continuous(v) => EnergyState::from_slice(v),
            State::Discrete(_) => None,
        }
        .filter(|s| (0.0..=self.cfg.storage_max).contains(&s.storage))
        .ok_or_else(|| EnvError::ForeignState(state.to_string()))?;
        self.current = s;
        self.done = false;
        Ok(())
    }

    fn step(&mut self, action: usize, _rng: &mut dyn RngCore) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        check_action(action, self.cfg.action_levels.len())?;
        let flows = energy_step(&self.cfg, &self.current, self.cfg.action_levels[action])?;
        self.elapsed += 1;
        let t = self.elapsed.min(self.cfg.horizon);
        self.current = EnergyState {
            storage: flows.next_storage,
            renewable: self.renewable[t],
            demand: self.demand[t],
            price: self.price[t],
        };
        let truncated = self.elapsed >= self.cfg.horizon;
        self.done = truncated;
        Ok(StepOutcome {
            next_state: self.state(),
            reward: flows.reward.to_vec(),
            terminated: false,
            truncated,
        })
    }

    fn describe(&self, state: &State) -> StateView {
        match state {
            State::Continuous(v) if v.len() == 4 => StateView {
                label: format!(
                    "storage {:.2}, renewable {:.2}, demand {:.2}, price {:.2}",
                    v[0], v[1], v[2], v[3]
                ),
                cell: None,
                values: Some(v.clone()),
            },
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvConfig;

    fn cfg() -> EnergyConfig {
        match EnvConfig::bundled(EnvKind::Energy) {
            EnvConfig::Energy(c) => c,
            _ => unreachable!(),
        }
    }

    fn st(storage: f64, renewable: f64, demand: f64, price: f64) -> EnergyState {
        EnergyState {
            storage,
            renewable,
            demand,
            price,
        }
    }

    #[test]
    fn discharge_covers_part_of_demand() {
        let f = energy_step(&cfg(), &st(5.0, 0.0, 3.0, 1.0), 2.0).unwrap();
        assert_eq!(f.g_charge, 0.0);
        assert_eq!(f.g_demand, 1.0);
        assert_eq!(f.reward, [-1.0, -1.0]);
        assert_eq!(f.next_storage, 3.0);
    }

    #[test]
    fn self_sufficient_step_is_free() {
        let f = energy_step(&cfg(), &st(0.0, 4.0, 3.0, 2.0), 0.0).unwrap();
        assert_eq!((f.g_charge, f.g_demand), (0.0, 0.0));
        assert_eq!(f.reward, [0.0, 0.0]);
    }

    #[test]
    fn over_discharge_forces_purchase() {
        let f = energy_step(&cfg(), &st(1.0, 3.0, 3.0, 1.0), 4.0).unwrap();
        assert_eq!(f.g_charge, 3.0);
        assert_eq!(f.next_storage, 0.0);
    }

    #[test]
    fn action_bound_is_enforced() {
        assert!(matches!(
            energy_step(&cfg(), &st(1.0, 0.0, 0.0, 1.0), 4.5),
            Err(EnvError::ActionOutOfRange { .. })
        ));
    }

    #[test]
    fn reset_is_deterministic_and_truncates_at_horizon() {
        let mut a = EnergyStorage::new(cfg()).unwrap();
        let mut b = EnergyStorage::new(cfg()).unwrap();
        a.reset(9);
        b.reset(9);
        assert_eq!(a.exogenous(), b.exogenous());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut steps = 0;
        loop {
            let out = a.step(3, &mut rng).unwrap();
            steps += 1;
            if out.truncated {
                break;
            }
        }
        assert_eq!(steps, 50);
    }

    #[test]
    fn storage_stays_in_bounds_and_charging_never_penalizes_discharge() {
        let c = cfg();
        let mut env = EnergyStorage::new(c.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        env.reset(4);
        for t in 0..50 {
            let action = [0, 1, 2, 3][t % 4];
            let out = env.step(action, &mut rng).unwrap();
            let s = env.current().storage;
            assert!((0.0..=c.storage_max).contains(&s));
            assert_eq!(out.reward[1], 0.0);
        }
    }
}
