//! The preference-driven training loop and its ground-truth-reward twin.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{greedy_action, td_step, EqlError, NetworkQ, QFunction, TabularQ, TdConfig, TdItem};
use crate::domain::{sample_weight, sample_weights, DiscountConfig, DomainError, Step, Weight, WeightGrid};
use crate::envs::{EnvError, EnvKind, Environment};
use crate::metrics::{frontier_from_policy, hypervolume, MetricsError};
use crate::replay::{PreferenceBuffer, ReplayBuffer, ReplayError, Transition};
use crate::reward_model::{RewardModel, RewardModelConfig, RewardModelError, TrainReport};
use crate::teacher::{Teacher, TeacherError, TeacherQuery};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eql(#[from] EqlError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    RewardModel(#[from] RewardModelError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QRealization {
    /// Tabular for discrete-state tasks, network otherwise.
    #[default]
    Auto,
    Tabular,
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub total_timesteps: usize,
    /// Random actions and no learning before this step (T_0).
    pub learning_starts: usize,
    /// Iterations between teacher feedback rounds (K).
    pub feedback_frequency: usize,
    /// Segment pairs per round (N_s).
    pub queries_per_round: usize,
    /// Weights per round (N_w); each pair is asked under every one.
    pub weights_per_round: usize,
    pub gamma: f64,
    pub batch: usize,
    pub learning_rate: f64,
    pub tabular_learning_rate: f64,
    pub tau: f64,
    /// Cap on the distinct minibatch weights used as filter candidates.
    pub envelope_weight_samples: usize,
    /// Extra candidate weights each sampled transition is also updated under.
    pub update_weights: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of training over which epsilon anneals.
    pub epsilon_fraction: f64,
    pub q_realization: QRealization,
    pub q_hidden: Vec<usize>,
    /// Query segment length; the environment's default when absent.
    pub segment_length: Option<usize>,
    /// Query segments start in this most recent fraction of the replay buffer.
    pub recency_window: f64,
    /// Let query segments run past an episode end as absorbing steps.
    pub pad_terminal_segments: bool,
    pub reward_gradient_steps: usize,
    pub reward_model: RewardModelConfig,
    pub replay_capacity: usize,
    pub eval_interval: usize,
    /// Uniform weights for expected utility.
    pub eval_weights: usize,
    pub eval_seed: u64,
    /// Resolution of the tabular weight grid; the evaluation grid's when absent.
    pub tabular_grid_resolution: Option<usize>,
    /// Start tabular entries at the per-objective reward scale instead of zero.
    pub optimistic_init: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            total_timesteps: 1_000_000,
            learning_starts: 1000,
            feedback_frequency: 500,
            queries_per_round: 300,
            weights_per_round: 10,
            gamma: 0.99,
            batch: 256,
            learning_rate: 3e-4,
            tabular_learning_rate: 0.5,
            tau: 1e-4,
            envelope_weight_samples: 32,
            update_weights: 4,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.5,
            q_realization: QRealization::Auto,
            q_hidden: vec![128, 128],
            segment_length: None,
            recency_window: 0.1,
            pad_terminal_segments: true,
            reward_gradient_steps: 200,
            reward_model: RewardModelConfig::default(),
            replay_capacity: crate::replay::DEFAULT_CAPACITY,
            eval_interval: 5000,
            eval_weights: 100,
            eval_seed: 7,
            tabular_grid_resolution: None,
            optimistic_init: false,
        }
    }
}

impl TrainerConfig {
    /// Settings sized for minutes-long runs on one core.
    pub fn desk(kind: EnvKind) -> Self {
        let base = TrainerConfig::default();
        match kind {
            EnvKind::DeepSeaTreasure => TrainerConfig {
                total_timesteps: 20_000,
                feedback_frequency: 1000,
                queries_per_round: 60,
                weights_per_round: 5,
                batch: 64,
                tabular_learning_rate: 1.0,
                tau: 1.0,
                envelope_weight_samples: 11,
                update_weights: 8,
                eval_interval: 2000,
                tabular_grid_resolution: Some(10),
                optimistic_init: true,
                reward_gradient_steps: 50,
                ..base
            },
            EnvKind::FruitTree => TrainerConfig {
                total_timesteps: 50_000,
                feedback_frequency: 1000,
                queries_per_round: 60,
                weights_per_round: 5,
                batch: 32,
                tau: 1.0,
                envelope_weight_samples: 8,
                update_weights: 2,
                eval_interval: 5000,
                ..base
            },
            EnvKind::ResourceGathering => TrainerConfig {
                total_timesteps: 50_000,
                feedback_frequency: 1000,
                queries_per_round: 60,
                weights_per_round: 5,
                batch: 32,
                tau: 1.0,
                envelope_weight_samples: 8,
                update_weights: 2,
                eval_interval: 5000,
                ..base
            },
            EnvKind::Energy => TrainerConfig {
                total_timesteps: 20_000,
                feedback_frequency: 1000,
                queries_per_round: 60,
                weights_per_round: 5,
                batch: 32,
                tau: 0.01,
                envelope_weight_samples: 4,
                update_weights: 0,
                eval_interval: 5000,
                eval_weights: 20,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        let counts = [
            ("feedback_frequency", self.feedback_frequency),
            ("queries_per_round", self.queries_per_round),
            ("weights_per_round", self.weights_per_round),
            ("batch", self.batch),
            ("envelope_weight_samples", self.envelope_weight_samples),
            ("replay_capacity", self.replay_capacity),
            ("eval_interval", self.eval_interval),
            ("eval_weights", self.eval_weights),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(TrainError::Config(format!("{name} must be positive")));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.recency_window > 0.0 && self.recency_window <= 1.0) {
            return bad("recency_window must lie in (0, 1]");
        }
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("epsilon_fraction", self.epsilon_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.learning_rate > 0.0 && self.tabular_learning_rate > 0.0 && self.tabular_learning_rate <= 1.0) {
            return bad("learning rates must be positive (tabular at most 1)");
        }
        if self.segment_length == Some(0) || self.tabular_grid_resolution == Some(0) {
            return bad("segment_length and tabular_grid_resolution must be positive");
        }
        Ok(())
    }

    pub fn epsilon(&self, step: usize) -> f64 {
        let span = self.epsilon_fraction * self.total_timesteps as f64;
        let frac = if span > 0.0 { (step as f64 / span).min(1.0) } else { 1.0 };
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// One evaluation: greedy returns on the evaluation grid, their
/// hypervolume, and expected utility over uniform weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub eu: f64,
    pub hv: f64,
    pub returns: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Feedback {
        step: usize,
        queries: usize,
        labels: usize,
        preferences: usize,
        report: Option<TrainReport>,
    },
    FeedbackSkipped {
        step: usize,
        reason: String,
    },
    Evaluation {
        step: usize,
        eu: f64,
        hv: f64,
    },
    Stopped {
        step: usize,
    },
}

/// Snapshot published to observers while a run progresses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub step: usize,
    pub total_timesteps: usize,
    pub replay_size: usize,
    pub preferences: usize,
    pub queries_issued: u64,
    pub eu: Option<f64>,
    pub hv: Option<f64>,
}

/// Observer callbacks. All methods default to no-ops.
pub trait RunHooks {
    fn on_event(&mut self, _event: &RunEvent) {}
    fn on_metric(&mut self, _record: &MetricRecord) {}
    fn on_status(&mut self, _status: &RunStatus) {}
    /// Polled once per iteration; `true` ends the run early.
    fn should_stop(&mut self) -> bool {
        false
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl RunHooks for NoHooks {}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub reward_model: Option<RewardModel>,
    pub q: QFunction,
    pub metrics: Vec<MetricRecord>,
    pub steps_completed: usize,
    pub preferences: usize,
    pub queries_issued: u64,
    pub stopped_early: bool,
}

/// Builds the Q function named by `cfg` for this environment.
pub fn build_q(env: &dyn Environment, cfg: &TrainerConfig, seed: u64) -> Result<QFunction, TrainError> {
    let spec = env.spec();
    let tabular = match cfg.q_realization {
        QRealization::Auto => spec.n_states().is_some(),
        QRealization::Tabular => true,
        QRealization::Network => false,
    };
    if tabular {
        let n_states = spec
            .n_states()
            .ok_or_else(|| TrainError::Config("tabular Q needs a discrete state space".into()))?;
        let grid = match cfg.tabular_grid_resolution {
            Some(r) => WeightGrid::new(spec.m, r)?,
            None => WeightGrid::evaluation(spec.m)?,
        };
        Ok(QFunction::Tabular(if cfg.optimistic_init {
            TabularQ::with_init(n_states, spec.n_actions(), grid, &spec.reward_scale)
        } else {
            TabularQ::new(n_states, spec.n_actions(), grid)
        }))
    } else {
        Ok(QFunction::Network(NetworkQ::new(spec, &cfg.q_hidden, cfg.learning_rate, seed)))
    }
}

/// Greedy evaluation on the evaluation grid plus expected utility.
pub fn evaluate(env: &dyn Environment, q: &QFunction, cfg: &TrainerConfig, step: usize) -> Result<MetricRecord, TrainError> {
    let m = env.spec().m;
    let grid = WeightGrid::evaluation(m)?;
    let (front, returns) = frontier_from_policy(q, env, grid.points(), cfg.gamma, cfg.eval_seed)?;
    let hv = hypervolume(&front)?;
    let weights = sample_weights(cfg.eval_weights, m, cfg.eval_seed)?;
    let mut sim = env.clone_box();
    let mut total = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let seed = cfg.eval_seed.wrapping_add(1 << 32).wrapping_add(i as u64);
        let ret = crate::metrics::greedy_return(sim.as_mut(), q, w, cfg.gamma, seed)?;
        total += w.dot(&ret);
    }
    Ok(MetricRecord {
        step,
        eu: total / weights.len() as f64,
        hv,
        returns,
    })
}

/// Independent deterministic random streams of one run.
struct Streams {
    act: ChaCha8Rng,
    env: ChaCha8Rng,
    replay: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams {
            act: stream(1),
            env: stream(2),
            replay: stream(3),
        }
    }
}

/// Per-step reward estimates, cached for discrete states and dropped
/// whenever the model changes.
struct RewardSource {
    model: Option<RewardModel>,
    cache: HashMap<Step, Vec<f64>>,
    cacheable: bool,
}

impl RewardSource {
    fn estimate(&mut self, t: &Transition) -> Result<Vec<f64>, TrainError> {
        let Some(model) = &self.model else {
            return Ok(t.true_reward.clone());
        };
        if !self.cacheable {
            return Ok(model.predict_reward(&t.state, t.action)?);
        }
        let key = t.step();
        if let Some(r) = self.cache.get(&key) {
            return Ok(r.clone());
        }
        let r = model.predict_reward(&t.state, t.action)?;
        self.cache.insert(key, r.clone());
        Ok(r)
    }
}

fn weight_key(q: &QFunction, w: &Weight) -> Vec<u64> {
    match q {
        QFunction::Tabular(t) => vec![t.grid().nearest(w) as u64],
        QFunction::Network(_) => w.values().iter().map(|x| x.to_bits()).collect(),
    }
}

/// Preference-driven envelope Q-learning against `teacher`.
pub fn run_pbmorl(
    env: &dyn Environment,
    teacher: &mut dyn Teacher,
    cfg: &TrainerConfig,
    seed: u64,
    hooks: &mut dyn RunHooks,
) -> Result<RunArtifacts, TrainError> {
    run(env, Some(teacher), cfg, seed, hooks)
}

/// The same loop on ground-truth rewards: no teacher, no reward model.
pub fn run_eql_oracle(env: &dyn Environment, cfg: &TrainerConfig, seed: u64, hooks: &mut dyn RunHooks) -> Result<RunArtifacts, TrainError> {
    run(env, None, cfg, seed, hooks)
}

fn run(
    env: &dyn Environment,
    mut teacher: Option<&mut dyn Teacher>,
    cfg: &TrainerConfig,
    seed: u64,
    hooks: &mut dyn RunHooks,
) -> Result<RunArtifacts, TrainError> {
    cfg.validate()?;
    let discount = DiscountConfig::new(cfg.gamma)?;
    let mut env = env.clone_box();
    let spec = env.spec().clone();
    let m = spec.m;
    let n_actions = spec.n_actions();
    let h = cfg.segment_length.unwrap_or(spec.segment_length);
    let mut streams = Streams::new(seed);
    let mut q = build_q(env.as_ref(), cfg, seed ^ 0x51)?;
    let mut target = match &q {
        QFunction::Tabular(_) if cfg.tau >= 1.0 => None,
        _ => Some(q.clone()),
    };
    let td_cfg = TdConfig {
        gamma: cfg.gamma,
        tabular_lr: cfg.tabular_learning_rate,
        tau: cfg.tau,
    };
    let mut rewards = RewardSource {
        model: teacher.as_ref().map(|_| RewardModel::new(&spec, &cfg.reward_model, seed ^ 0x52)),
        cache: HashMap::new(),
        cacheable: spec.n_states().is_some(),
    };
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut prefs = PreferenceBuffer::new();
    let mut metrics = Vec::new();
    let mut status = RunStatus {
        total_timesteps: cfg.total_timesteps,
        ..Default::default()
    };
    let mut next_query_id: u64 = 0;
    let mut round: u64 = 0;

    let mut episode: u64 = 0;
    let mut step_in_episode = 0usize;
    let mut w = sample_weight(&mut streams.act, m);
    let mut state = env.reset(streams.act.random());
    let mut stopped_early = false;
    let mut completed = 0;

    for step in 1..=cfg.total_timesteps {
        if hooks.should_stop() {
            stopped_early = true;
            hooks.on_event(&RunEvent::Stopped { step: completed });
            break;
        }
        let learning = step > cfg.learning_starts;
        let explore = !learning || streams.act.random::<f64>() < cfg.epsilon(step);
        let action = if explore {
            streams.act.random_range(0..n_actions)
        } else {
            greedy_action(&q, &state, &w)?
        };
        let out = env.step(action, &mut streams.env)?;
        let mut t = Transition {
            state: state.clone(),
            action,
            next_state: out.next_state.clone(),
            reward_estimate: Vec::new(),
            true_reward: out.reward,
            weight: w.clone(),
            episode,
            step_index: step_in_episode,
            order: 0,
            terminated: out.terminated,
            truncated: out.truncated,
        };
        t.reward_estimate = rewards.estimate(&t)?;
        replay.push(t)?;
        step_in_episode += 1;
        if out.terminated || out.truncated {
            episode += 1;
            step_in_episode = 0;
            w = sample_weight(&mut streams.act, m);
            state = env.reset(streams.act.random());
        } else {
            state = out.next_state;
        }

        if let Some(teacher) = teacher.as_deref_mut() {
            if step >= cfg.learning_starts && step % cfg.feedback_frequency == 0 {
                round += 1;
                let event = feedback_round(
                    teacher,
                    &mut rewards,
                    &mut replay,
                    &mut prefs,
                    cfg,
                    &discount,
                    h,
                    step,
                    seed ^ round.wrapping_mul(0x9e37_79b9_7f4a_7c15),
                    &mut streams.replay,
                    &mut next_query_id,
                    m,
                )?;
                hooks.on_event(&event);
            }
        }

        if learning {
            let idx = replay.sample_indices(cfg.batch, &mut streams.replay)?;
            let batch: Vec<&Transition> = idx.iter().map(|&i| replay.get(i)).collect();
            let mut seen = HashSet::new();
            let mut shared: Vec<Weight> = Vec::new();
            for t in &batch {
                if shared.len() == cfg.envelope_weight_samples {
                    break;
                }
                if seen.insert(weight_key(&q, &t.weight)) {
                    shared.push(t.weight.clone());
                }
            }
            let mut items = Vec::with_capacity(batch.len() * (1 + cfg.update_weights));
            for t in &batch {
                items.push(TdItem {
                    transition: t,
                    weight: t.weight.clone(),
                });
                for _ in 0..cfg.update_weights {
                    let extra = shared[streams.replay.random_range(0..shared.len())].clone();
                    items.push(TdItem {
                        transition: t,
                        weight: extra,
                    });
                }
            }
            td_step(&mut q, target.as_mut(), &items, &shared, &td_cfg)?;
        }

        completed = step;
        if step % cfg.eval_interval == 0 || step == cfg.total_timesteps {
            let record = evaluate(env.as_ref(), &q, cfg, step)?;
            hooks.on_event(&RunEvent::Evaluation {
                step,
                eu: record.eu,
                hv: record.hv,
            });
            hooks.on_metric(&record);
            status.eu = Some(record.eu);
            status.hv = Some(record.hv);
            metrics.push(record);
        }
        if step % 100 == 0 || step == cfg.total_timesteps {
            status.step = step;
            status.replay_size = replay.len();
            status.preferences = prefs.len();
            status.queries_issued = next_query_id;
            hooks.on_status(&status);
        }
    }

    Ok(RunArtifacts {
        reward_model: rewards.model,
        q,
        metrics,
        steps_completed: completed,
        preferences: prefs.len(),
        queries_issued: next_query_id,
        stopped_early,
    })
}

#[allow(clippy::too_many_arguments)]
fn feedback_round(
    teacher: &mut dyn Teacher,
    rewards: &mut RewardSource,
    replay: &mut ReplayBuffer,
    prefs: &mut PreferenceBuffer,
    cfg: &TrainerConfig,
    discount: &DiscountConfig,
    h: usize,
    step: usize,
    train_seed: u64,
    rng: &mut ChaCha8Rng,
    next_query_id: &mut u64,
    m: usize,
) -> Result<RunEvent, TrainError> {
    let pairs = match replay.sample_query_pairs(cfg.queries_per_round, h, cfg.recency_window, cfg.pad_terminal_segments, rng) {
        Ok(p) => p,
        Err(e @ ReplayError::InsufficientData { .. }) => {
            return Ok(RunEvent::FeedbackSkipped {
                step,
                reason: e.to_string(),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let weights: Vec<Weight> = (0..cfg.weights_per_round).map(|_| sample_weight(rng, m)).collect();
    let mut queries = Vec::with_capacity(pairs.len() * weights.len());
    for (a, b) in &pairs {
        for w in &weights {
            let q = TeacherQuery::new(*next_query_id, a.segment.clone(), b.segment.clone(), w.clone())?
                .with_ground_truth(a.true_rewards.clone(), b.true_rewards.clone())
                .at_step(step as u64);
            *next_query_id += 1;
            queries.push(q);
        }
    }
    let n_queries = queries.len();
    teacher.submit(queries)?;
    let labels = teacher.collect()?;
    let n_labels = labels.len();
    prefs.extend(labels);
    let report = if prefs.is_empty() {
        None
    } else {
        let model = rewards.model.as_mut().expect("feedback rounds only run with a reward model");
        let report = model.train(prefs, cfg.reward_gradient_steps, discount, train_seed)?;
        rewards.cache.clear();
        model.relabel_all(replay)?;
        Some(report)
    };
    Ok(RunEvent::Feedback {
        step,
        queries: n_queries,
        labels: n_labels,
        preferences: prefs.len(),
        report,
    })
}
