//! Preference-based multi-objective reinforcement learning.
//!
//! A vector reward model is fit to weight-conditioned pairwise preferences
//! and drives envelope Q-learning. Brute-force oracles, frontier algorithms
//! and metrics make the pieces checkable on small tasks.

pub mod domain;
pub mod envs;
pub mod teacher;
pub mod nn;
pub mod replay;
pub mod reward_model;
pub mod eql;
pub mod pareto;
pub mod metrics;
pub mod checkpoint;
