//! Small fully connected networks over a flat parameter vector, with
//! reverse-mode gradients and Adam.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Output transform of the last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    /// `scale_k · tanh(z_k)` per output.
    Bounded(Vec<f64>),
}

/// Feedforward net with tanh hidden layers. Layer `l` stores its weights
/// as `[in][out]` followed by `out` biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    head: Head,
    params: Vec<f64>,
}

/// Per-layer activations kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// Xavier-uniform weights and zero biases. `zero_output` zeroes the last
    /// layer so the initial output is exactly zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], head: Head, zero_output: bool, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0));
        if let Head::Bounded(scale) = &head {
            assert_eq!(scale.len(), *sizes.last().unwrap());
        }
        let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut params = Vec::with_capacity(n);
        let layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let zero = zero_output && l == layers - 1;
            for _ in 0..w[0] * w[1] {
                params.push(if zero { 0.0 } else { rng.random_range(-limit..limit) });
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Mlp {
            sizes: sizes.to_vec(),
            head,
            params,
        }
    }

    pub fn from_parts(sizes: Vec<usize>, head: Head, params: Vec<f64>) -> Option<Self> {
        let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (sizes.len() >= 2 && params.len() == n).then_some(Mlp { sizes, head, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::default();
        self.forward_tape(x, &mut tape);
        tape.acts.pop().unwrap()
    }

    /// Forward pass recording activations into `tape`.
    pub fn forward_tape(&self, x: &[f64], tape: &mut Tape) {
        assert_eq!(x.len(), self.sizes[0], "input dimension");
        let layers = self.sizes.len() - 1;
        tape.acts.resize(layers + 1, Vec::new());
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let (done, rest) = tape.acts.split_at_mut(l + 1);
            let input = &done[l];
            let out = &mut rest[0];
            out.clear();
            out.extend_from_slice(b);
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &w[i * n_out..(i + 1) * n_out];
                for (o, wij) in out.iter_mut().zip(row) {
                    *o += xi * wij;
                }
            }
            if l + 1 < layers {
                out.iter_mut().for_each(|z| *z = z.tanh());
            } else if let Head::Bounded(scale) = &self.head {
                out.iter_mut().zip(scale).for_each(|(z, s)| *z = s * z.tanh());
            }
        }
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`
    /// for the pass recorded in `tape`.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        debug_assert_eq!(grad.len(), self.params.len());
        let mut delta: Vec<f64> = match &self.head {
            Head::Linear => grad_out.to_vec(),
            Head::Bounded(scale) => grad_out
                .iter()
                .zip(&tape.acts[layers])
                .zip(scale)
                .map(|((g, y), s)| if *s > 0.0 { g * (s - y * y / s) } else { 0.0 })
                .collect(),
        };
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &tape.acts[l];
            {
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for (g, d) in gb.iter_mut().zip(&delta) {
                    *g += d;
                }
                for (i, &xi) in input.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &mut gw[i * n_out..(i + 1) * n_out];
                    for (g, d) in row.iter_mut().zip(&delta) {
                        *g += xi * d;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut next = vec![0.0; n_in];
            for (i, nx) in next.iter_mut().enumerate() {
                let row = &w[i * n_out..(i + 1) * n_out];
                let s: f64 = row.iter().zip(&delta).map(|(a, b)| a * b).sum();
                let a = input[i];
                *nx = s * (1.0 - a * a);
            }
            delta = next;
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
