//! Expected utility and hypervolume, plus greedy evaluation of a trained
//! Q function over a weight grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{sample_weights, DomainError, Weight};
use crate::eql::{greedy_action, EqlError, QFunction};
use crate::envs::{EnvError, Environment};
use crate::pareto::{brute_force_frontier, ParetoError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("point {index} lies below the reference point")]
    BadReference { index: usize },
    #[error("hypervolume needs 2 to 6 objectives, got {0}")]
    BadDimension(usize),
    #[error("point has {actual} components, reference has {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("need at least one weight")]
    NoWeights,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Eql(#[from] EqlError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
}

/// An approximate frontier together with its reference point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierEstimate {
    pub points: Vec<Vec<f64>>,
    pub reference: Vec<f64>,
}

/// Mean of `evaluate(w)` over `n` uniform simplex weights drawn from `seed`.
pub fn expected_utility<F, E>(mut evaluate: F, n: usize, m: usize, seed: u64) -> Result<f64, E>
where
    F: FnMut(&Weight) -> Result<f64, E>,
    E: From<MetricsError>,
{
    if n == 0 {
        return Err(MetricsError::NoWeights.into());
    }
    let weights = sample_weights(n, m, seed).map_err(MetricsError::from)?;
    let mut total = 0.0;
    for w in &weights {
        total += evaluate(w)?;
    }
    Ok(total / n as f64)
}

/// Union volume of the boxes `[reference, p]`. Points below the reference
/// are clipped onto it (with a warning) when `clip` is set, rejected
/// otherwise.
pub fn hypervolume_with(f: &FrontierEstimate, clip: bool) -> Result<f64, MetricsError> {
    let m = f.reference.len();
    if !(2..=6).contains(&m) {
        return Err(MetricsError::BadDimension(m));
    }
    let mut shifted = Vec::with_capacity(f.points.len());
    let mut clipped = 0;
    for (index, p) in f.points.iter().enumerate() {
        if p.len() != m {
            return Err(MetricsError::DimensionMismatch {
                expected: m,
                actual: p.len(),
            });
        }
        let mut q = Vec::with_capacity(m);
        let mut below = false;
        for (x, r) in p.iter().zip(&f.reference) {
            let d = x - r;
            below |= d < 0.0;
            q.push(d.max(0.0));
        }
        if below {
            if !clip {
                return Err(MetricsError::BadReference { index });
            }
            clipped += 1;
        }
        if q.iter().all(|x| *x > 0.0) {
            shifted.push(q);
        }
    }
    if clipped > 0 {
        log::warn!("hypervolume: clipped {clipped} point(s) onto the reference");
    }
    let front = nondominated(shifted);
    Ok(if m == 2 { hv2(front) } else { wfg(front) })
}

pub fn hypervolume(f: &FrontierEstimate) -> Result<f64, MetricsError> {
    hypervolume_with(f, true)
}

/// Removes dominated and duplicate points (maximization).
fn nondominated(mut pts: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    pts.sort_by(|a, b| b.partial_cmp(a).expect("finite coordinates"));
    pts.dedup();
    let mut keep: Vec<Vec<f64>> = Vec::with_capacity(pts.len());
    for p in pts {
        if !keep.iter().any(|k| k.iter().zip(&p).all(|(a, b)| a >= b)) {
            keep.push(p);
        }
    }
    keep
}

/// Two objectives, reference at the origin: sweep by the first coordinate.
fn hv2(mut pts: Vec<Vec<f64>>) -> f64 {
    pts.sort_by(|a, b| b[0].partial_cmp(&a[0]).unwrap());
    let mut area = 0.0;
    let mut height = 0.0f64;
    for p in &pts {
        if p[1] > height {
            area += p[0] * (p[1] - height);
            height = p[1];
        }
    }
    area
}

/// Exclusive-contribution recursion over a non-dominated set, reference
/// at the origin.
fn wfg(mut pts: Vec<Vec<f64>>) -> f64 {
    match pts.len() {
        0 => return 0.0,
        1 => return pts[0].iter().product(),
        _ => {}
    }
    if pts[0].len() == 2 {
        return hv2(pts);
    }
    let last = pts[0].len() - 1;
    pts.sort_by(|a, b| b[last].partial_cmp(&a[last]).unwrap());
    let mut total = 0.0;
    for i in 0..pts.len() {
        let p = &pts[i];
        let limited: Vec<Vec<f64>> = pts[i + 1..]
            .iter()
            .map(|q| q.iter().zip(p).map(|(a, b)| a.min(*b)).collect())
            .collect();
        let inner = wfg(nondominated(limited));
        total += p.iter().product::<f64>() - inner;
    }
    total
}

/// Discounted return of the greedy policy for `w`, one episode from
/// `reset(seed)`.
pub fn greedy_return(env: &mut dyn Environment, q: &QFunction, w: &Weight, gamma: f64, seed: u64) -> Result<Vec<f64>, MetricsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = env.reset(seed);
    let m = env.spec().m;
    let limit = env.spec().max_episode_length;
    let mut ret = vec![0.0; m];
    let mut discount = 1.0;
    for _ in 0..limit {
        let a = greedy_action(q, &state, w)?;
        let out = env.step(a, &mut rng)?;
        for (acc, r) in ret.iter_mut().zip(&out.reward) {
            *acc += discount * r;
        }
        discount *= gamma;
        state = out.next_state;
        if out.terminated || out.truncated {
            break;
        }
    }
    Ok(ret)
}

/// Greedy returns for every grid weight, pruned to the non-dominated set.
pub fn frontier_from_policy(
    q: &QFunction,
    env: &dyn Environment,
    grid: &[Weight],
    gamma: f64,
    seed: u64,
) -> Result<(FrontierEstimate, Vec<Vec<f64>>), MetricsError> {
    let mut env = env.clone_box();
    let returns: Vec<Vec<f64>> = grid
        .iter()
        .enumerate()
        .map(|(i, w)| greedy_return(env.as_mut(), q, w, gamma, seed.wrapping_add(i as u64)))
        .collect::<Result<_, _>>()?;
    let keep = if returns.is_empty() { Vec::new() } else { brute_force_frontier(&returns)? };
    let mut points: Vec<Vec<f64>> = keep.iter().map(|&i| returns[i].clone()).collect();
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();
    Ok((
        FrontierEstimate {
            points,
            reference: env.spec().reference.clone(),
        },
        returns,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(points: &[&[f64]], reference: &[f64]) -> FrontierEstimate {
        FrontierEstimate {
            points: points.iter().map(|p| p.to_vec()).collect(),
            reference: reference.to_vec(),
        }
    }

    #[test]
    fn worked_examples() {
        assert_eq!(hypervolume(&f(&[&[2.0, 1.0], &[1.0, 2.0]], &[0.0, 0.0])).unwrap(), 3.0);
        assert_eq!(hypervolume(&f(&[&[3.0, 5.0]], &[0.0, 0.0])).unwrap(), 15.0);
        assert_eq!(hypervolume(&f(&[&[2.0, 1.0], &[1.0, 2.0], &[0.5, 0.5]], &[0.0, 0.0])).unwrap(), 3.0);
        assert_eq!(hypervolume(&f(&[], &[0.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn three_d_inclusion_exclusion() {
        // boxes 2x1x1 and 1x2x1 overlap in 1x1x1; a third 1x1x2 overlaps each in 1
        let v = hypervolume(&f(&[&[2.0, 1.0, 1.0], &[1.0, 2.0, 1.0], &[1.0, 1.0, 2.0]], &[0.0; 3])).unwrap();
        assert!((v - 4.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn reference_handling() {
        let below = f(&[&[-1.0, 2.0], &[1.0, 1.0]], &[0.0, 0.0]);
        assert_eq!(hypervolume(&below).unwrap(), 1.0);
        assert_eq!(hypervolume_with(&below, false), Err(MetricsError::BadReference { index: 0 }));
        assert_eq!(hypervolume(&f(&[&[1.0]], &[0.0])), Err(MetricsError::BadDimension(1)));
    }

    #[test]
    fn expected_utility_examples() {
        let c = expected_utility::<_, MetricsError>(|_| Ok(2.5), 7, 3, 1).unwrap();
        assert_eq!(c, 2.5);
        let lin = expected_utility::<_, MetricsError>(|w| Ok(w.dot(&[2.0, 4.0])), 100_000, 2, 5).unwrap();
        assert!((lin - 3.0).abs() < 0.02, "{lin}");
        let again = expected_utility::<_, MetricsError>(|w| Ok(w.dot(&[2.0, 4.0])), 100_000, 2, 5).unwrap();
        assert_eq!(lin, again);
    }
}
