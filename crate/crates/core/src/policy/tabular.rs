//! Softmax-tabular policy over a small discrete state space.
//!
//! Observations are one-hot state indicators; actions are a single
//! coordinate holding the action index. Used by the enumeration oracles.

use nalgebra::DMatrix;
use rand::Rng;

use crate::rng::StreamRng;

pub(crate) fn state_of(obs: &[f64]) -> usize {
    obs.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

pub(crate) fn probs(flat: &[f64], n_actions: usize, state: usize) -> Vec<f64> {
    let logits = &flat[state * n_actions..(state + 1) * n_actions];
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn sample(flat: &[f64], n_actions: usize, obs: &[f64], rng: &mut StreamRng) -> Vec<f64> {
    let p = probs(flat, n_actions, state_of(obs));
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, pa) in p.iter().enumerate() {
        acc += pa;
        if u < acc {
            return vec![a as f64];
        }
    }
    vec![(n_actions - 1) as f64]
}

pub(crate) fn log_prob(flat: &[f64], n_actions: usize, obs: &[f64], action: &[f64]) -> f64 {
    probs(flat, n_actions, state_of(obs))[action[0] as usize].ln()
}

pub(crate) fn score(flat: &[f64], n_actions: usize, obs: &[f64], action: &[f64]) -> Vec<f64> {
    let s = state_of(obs);
    let p = probs(flat, n_actions, s);
    let mut g = vec![0.0; flat.len()];
    for (b, pb) in p.iter().enumerate() {
        g[s * n_actions + b] = -pb;
    }
    g[s * n_actions + action[0] as usize] += 1.0;
    g
}

pub(crate) fn log_prob_hessian(flat: &[f64], n_actions: usize, obs: &[f64]) -> DMatrix<f64> {
    let s = state_of(obs);
    let p = probs(flat, n_actions, s);
    let mut h = DMatrix::zeros(flat.len(), flat.len());
    for a in 0..n_actions {
        for b in 0..n_actions {
            let v = if a == b { p[a] - p[a] * p[b] } else { -p[a] * p[b] };
            h[(s * n_actions + a, s * n_actions + b)] = -v;
        }
    }
    h
}
