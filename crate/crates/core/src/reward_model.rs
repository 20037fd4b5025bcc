//! Learned vector reward fit by Bradley-Terry cross-entropy on
//! weight-conditioned preferences.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DiscountConfig, Label, PreferenceRecord, Segment, State, Step, Weight};
use crate::envs::{EncodingError, EnvSpec, StepEncoder};
use crate::nn::{Adam, Head, Mlp, Tape};
use crate::replay::{PreferenceBuffer, ReplayBuffer};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardModelError {
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("preference buffer is empty")]
    EmptyBuffer,
    #[error("weight has {actual} components, model emits {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardModelConfig {
    pub hidden: Vec<usize>,
    /// Bound outputs to `bound_margin · reward_scale` through tanh.
    pub bounded: bool,
    pub bound_margin: f64,
    pub learning_rate: f64,
    pub batch: usize,
    /// Every tenth record is held out when true.
    pub validation: bool,
    /// Loss and accuracy in the training report cover only this many of
    /// the most recent records.
    pub report_window: usize,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        RewardModelConfig {
            hidden: vec![128, 128],
            bounded: false,
            bound_margin: 1.25,
            learning_rate: 3e-4,
            batch: 256,
            validation: true,
            report_window: 5000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RewardModel {
    encoder: StepEncoder,
    net: Mlp,
    opt: Adam,
    batch: usize,
    validation: bool,
    report_window: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_records: usize,
    pub train_accuracy: Option<f64>,
    pub validation_records: usize,
    pub validation_accuracy: Option<f64>,
}

/// `1 / (1 + e^{-d})`, arranged so that `sigmoid(d) + sigmoid(-d) == 1`
/// holds exactly.
pub fn sigmoid(d: f64) -> f64 {
    let small = (-d.abs()).exp();
    let q = small / (1.0 + small);
    if d >= 0.0 {
        1.0 - q
    } else {
        q
    }
}

impl RewardModel {
    /// Network with a zero-initialized output layer, so every prediction
    /// starts at exactly zero.
    pub fn new(spec: &EnvSpec, cfg: &RewardModelConfig, seed: u64) -> Self {
        let encoder = StepEncoder::new(spec);
        let mut sizes = vec![encoder.dim()];
        sizes.extend(&cfg.hidden);
        sizes.push(spec.m);
        let head = if cfg.bounded {
            Head::Bounded(spec.reward_scale.iter().map(|s| s * cfg.bound_margin).collect())
        } else {
            Head::Linear
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&sizes, head, true, &mut rng);
        Self::from_parts(encoder, net, cfg)
    }

    pub fn from_parts(encoder: StepEncoder, net: Mlp, cfg: &RewardModelConfig) -> Self {
        assert_eq!(encoder.dim(), net.input_dim(), "encoder and network disagree");
        RewardModel {
            opt: Adam::new(net.n_params(), cfg.learning_rate),
            encoder,
            net,
            batch: cfg.batch.max(1),
            validation: cfg.validation,
            report_window: cfg.report_window.max(10),
        }
    }

    pub fn m(&self) -> usize {
        self.net.output_dim()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn encoder(&self) -> &StepEncoder {
        &self.encoder
    }

    pub fn predict_reward(&self, state: &State, action: usize) -> Result<Vec<f64>, RewardModelError> {
        let x = self.encoder.encode(state, action)?;
        Ok(self.net.forward(&x))
    }

    fn check_weight(&self, w: &Weight) -> Result<(), RewardModelError> {
        if w.dim() != self.m() {
            return Err(RewardModelError::DimensionMismatch {
                expected: self.m(),
                actual: w.dim(),
            });
        }
        Ok(())
    }

    /// `Σ_t γ^t w · r̂(s_t, a_t)`; absorbing steps add nothing.
    pub fn segment_score(&self, seg: &Segment, w: &Weight, cfg: &DiscountConfig) -> Result<f64, RewardModelError> {
        self.check_weight(w)?;
        let mut score = 0.0;
        let mut discount = 1.0;
        for step in seg.steps() {
            score += discount * w.dot(&self.predict_reward(&step.state, step.action)?);
            discount *= cfg.gamma();
        }
        Ok(score)
    }

    /// `P[σ1 ≻ σ0 | w]` under the Bradley-Terry link.
    pub fn predict_preference(
        &self,
        first: &Segment,
        second: &Segment,
        w: &Weight,
        cfg: &DiscountConfig,
    ) -> Result<f64, RewardModelError> {
        let s0 = self.segment_score(first, w, cfg)?;
        let s1 = self.segment_score(second, w, cfg)?;
        Ok(sigmoid(s1 - s0))
    }

    pub fn preference_loss(&self, batch: &[PreferenceRecord], cfg: &DiscountConfig) -> Result<f64, RewardModelError> {
        let refs: Vec<&PreferenceRecord> = batch.iter().collect();
        let eval = BatchEval::new(self, &refs, cfg.gamma())?;
        Ok(eval.loss(false).0)
    }

    /// Loss and its exact gradient with respect to the flat parameters.
    pub fn loss_and_grad(&self, batch: &[&PreferenceRecord], cfg: &DiscountConfig) -> Result<(f64, Vec<f64>), RewardModelError> {
        let eval = BatchEval::new(self, batch, cfg.gamma())?;
        let (loss, grad) = eval.loss(true);
        Ok((loss, grad.expect("gradient requested")))
    }

    /// Fraction of strictly labelled records whose predicted side matches.
    pub fn accuracy(&self, records: &[&PreferenceRecord], cfg: &DiscountConfig) -> Result<Option<f64>, RewardModelError> {
        if records.is_empty() {
            return Ok(None);
        }
        let eval = BatchEval::new(self, records, cfg.gamma())?;
        Ok(eval.accuracy())
    }

    /// `gradient_steps` Adam steps on minibatches drawn with replacement from
    /// the training part of `prefs`.
    pub fn train(
        &mut self,
        prefs: &PreferenceBuffer,
        gradient_steps: usize,
        cfg: &DiscountConfig,
        seed: u64,
    ) -> Result<TrainReport, RewardModelError> {
        if prefs.is_empty() {
            return Err(RewardModelError::EmptyBuffer);
        }
        let all = prefs.records();
        let holdout = self.validation && all.len() >= 10;
        let train: Vec<&PreferenceRecord> = all
            .iter()
            .enumerate()
            .filter(|(i, _)| !holdout || i % 10 != 9)
            .map(|(_, r)| r)
            .collect();
        let tail = all.len().saturating_sub(self.report_window);
        let recent = |keep_held: bool| -> Vec<&PreferenceRecord> {
            all.iter()
                .enumerate()
                .skip(tail)
                .filter(|(i, _)| holdout && (i % 10 == 9) == keep_held || !holdout && !keep_held)
                .map(|(_, r)| r)
                .collect()
        };
        let report_train = recent(false);
        let held = recent(true);
        let initial = BatchEval::new(self, &report_train, cfg.gamma())?.loss(false).0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = self.batch.min(train.len());
        let mut picked = Vec::with_capacity(size);
        for _ in 0..gradient_steps {
            picked.clear();
            picked.extend((0..size).map(|_| train[rng.random_range(0..train.len())]));
            let (_, grad) = self.loss_and_grad(&picked, cfg)?;
            self.opt.step(self.net.params_mut(), &grad);
        }
        let end = BatchEval::new(self, &report_train, cfg.gamma())?;
        let final_loss = end.loss(false).0;
        Ok(TrainReport {
            steps: gradient_steps,
            initial_loss: initial,
            final_loss,
            train_records: train.len(),
            train_accuracy: end.accuracy(),
            validation_records: held.len(),
            validation_accuracy: self.accuracy(&held, cfg)?,
        })
    }

    /// Rewrites every reward estimate in `buffer` with this model. Each
    /// distinct (state, action) is evaluated once.
    pub fn relabel_all(&self, buffer: &mut ReplayBuffer) -> Result<(), RewardModelError> {
        let mut cache: HashMap<Step, Vec<f64>> = HashMap::new();
        buffer.relabel_with(|state, action| {
            let key = Step::new(state.clone(), action);
            if let Some(r) = cache.get(&key) {
                return Ok(r.clone());
            }
            let r = self.predict_reward(state, action)?;
            cache.insert(key, r.clone());
            Ok(r)
        })
    }
}

/// Forward results for one batch: unique steps are evaluated once and the
/// per-record score differences are assembled from them.
struct BatchEval<'a> {
    model: &'a RewardModel,
    records: &'a [&'a PreferenceRecord],
    tapes: Vec<Tape>,
    // per record: (unique step index, discount) for each segment
    first: Vec<Vec<(usize, f64)>>,
    second: Vec<Vec<(usize, f64)>>,
}

impl<'a> BatchEval<'a> {
    fn new(model: &'a RewardModel, records: &'a [&'a PreferenceRecord], gamma: f64) -> Result<Self, RewardModelError> {
        if records.is_empty() {
            return Err(RewardModelError::EmptyBatch);
        }
        let mut index: HashMap<&Step, usize> = HashMap::new();
        let mut tapes = Vec::new();
        let mut input = vec![0.0; model.encoder.dim()];
        let mut locate = |seg: &'a Segment, tapes: &mut Vec<Tape>| -> Result<Vec<(usize, f64)>, RewardModelError> {
            let mut out = Vec::with_capacity(seg.steps().len());
            let mut discount = 1.0;
            for step in seg.steps() {
                let id = match index.get(step) {
                    Some(&i) => i,
                    None => {
                        input.iter_mut().for_each(|x| *x = 0.0);
                        model.encoder.encode_into(&step.state, step.action, &mut input)?;
                        let mut tape = Tape::default();
                        model.net.forward_tape(&input, &mut tape);
                        tapes.push(tape);
                        index.insert(step, tapes.len() - 1);
                        tapes.len() - 1
                    }
                };
                out.push((id, discount));
                discount *= gamma;
            }
            Ok(out)
        };
        let mut first = Vec::with_capacity(records.len());
        let mut second = Vec::with_capacity(records.len());
        for r in records {
            model.check_weight(&r.weight)?;
            first.push(locate(&r.first, &mut tapes)?);
            second.push(locate(&r.second, &mut tapes)?);
        }
        Ok(BatchEval {
            model,
            records,
            tapes,
            first,
            second,
        })
    }

    fn score(&self, w: &Weight, steps: &[(usize, f64)]) -> f64 {
        steps.iter().map(|(id, d)| d * w.dot(self.tapes[*id].output())).sum()
    }

    fn difference(&self, i: usize) -> f64 {
        let w = &self.records[i].weight;
        self.score(w, &self.second[i]) - self.score(w, &self.first[i])
    }

    fn loss(&self, with_grad: bool) -> (f64, Option<Vec<f64>>) {
        let n = self.records.len() as f64;
        let m = self.model.m();
        let mut total = 0.0;
        let mut grad_out = if with_grad {
            vec![0.0; self.tapes.len() * m]
        } else {
            Vec::new()
        };
        for i in 0..self.records.len() {
            let d = self.difference(i);
            let p1 = sigmoid(d);
            let p0 = sigmoid(-d);
            let label = self.records[i].label.value();
            total -= (1.0 - label) * p0.max(PROB_FLOOR).ln() + label * p1.max(PROB_FLOOR).ln();
            if with_grad {
                let g0 = if p0 >= PROB_FLOOR { p1 } else { 0.0 };
                let g1 = if p1 >= PROB_FLOOR { p0 } else { 0.0 };
                let dl_dd = ((1.0 - label) * g0 - label * g1) / n;
                let w = self.records[i].weight.values();
                for (steps, sign) in [(&self.second[i], 1.0), (&self.first[i], -1.0)] {
                    for (id, discount) in steps {
                        let c = sign * dl_dd * discount;
                        for k in 0..m {
                            grad_out[id * m + k] += c * w[k];
                        }
                    }
                }
            }
        }
        let grad = with_grad.then(|| {
            let mut grad = vec![0.0; self.model.net.n_params()];
            for (id, tape) in self.tapes.iter().enumerate() {
                let g = &grad_out[id * m..(id + 1) * m];
                if g.iter().any(|x| *x != 0.0) {
                    self.model.net.backward(tape, g, &mut grad);
                }
            }
            grad
        });
        (total / n, grad)
    }

    fn accuracy(&self) -> Option<f64> {
        let mut strict = 0usize;
        let mut right = 0usize;
        for i in 0..self.records.len() {
            let want = match self.records[i].label {
                Label::Indifferent => continue,
                Label::SecondPreferred => true,
                Label::FirstPreferred => false,
            };
            strict += 1;
            if (self.difference(i) > 0.0) == want {
                right += 1;
            }
        }
        (strict > 0).then(|| right as f64 / strict as f64)
    }
}
