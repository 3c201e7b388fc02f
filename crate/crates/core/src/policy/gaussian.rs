//! One-hidden-layer tanh MLP with a diagonal Gaussian head.
//!
//! Flat layout: `[W1 (h x o, row-major), b1 (h), W2 (a x h, row-major), b2 (a), log_std (a)]`.
//! The log-density, its gradient and its Hessian are all computed in closed
//! form from one forward pass.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::StreamRng;

/// Lower bound applied to every `log_std` coordinate. Below the floor the
/// coordinate is inactive (zero gradient).
pub const LOG_STD_FLOOR: f64 = -5.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub obs: usize,
    pub hidden: usize,
    pub act: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        (self.obs + 1) * self.hidden + (self.hidden + 1) * self.act + self.act
    }
    fn w1(&self, k: usize, i: usize) -> usize {
        k * self.obs + i
    }
    fn b1(&self, k: usize) -> usize {
        self.hidden * self.obs + k
    }
    fn w2(&self, j: usize, k: usize) -> usize {
        self.hidden * self.obs + self.hidden + j * self.hidden + k
    }
    fn b2(&self, j: usize) -> usize {
        self.hidden * (self.obs + 1) + self.act * self.hidden + j
    }
    pub fn log_std(&self, j: usize) -> usize {
        self.b2(0) + self.act + j
    }
}

struct Forward {
    hidden: Vec<f64>,
    mean: Vec<f64>,
}

fn forward(l: &Layout, flat: &[f64], obs: &[f64]) -> Forward {
    let mut hidden = vec![0.0; l.hidden];
    for (k, h) in hidden.iter_mut().enumerate() {
        let mut z = flat[l.b1(k)];
        for (i, x) in obs.iter().enumerate() {
            z += flat[l.w1(k, i)] * x;
        }
        *h = z.tanh();
    }
    let mut mean = vec![0.0; l.act];
    for (j, m) in mean.iter_mut().enumerate() {
        let mut v = flat[l.b2(j)];
        for (k, h) in hidden.iter().enumerate() {
            v += flat[l.w2(j, k)] * h;
        }
        *m = v;
    }
    Forward { hidden, mean }
}

/// Effective log standard deviation and whether the floor is inactive.
fn log_std(l: &Layout, flat: &[f64], j: usize) -> (f64, bool) {
    let s = flat[l.log_std(j)];
    if s >= LOG_STD_FLOOR {
        (s, true)
    } else {
        (LOG_STD_FLOOR, false)
    }
}

pub(crate) fn mean(l: &Layout, flat: &[f64], obs: &[f64]) -> Vec<f64> {
    forward(l, flat, obs).mean
}

pub(crate) fn sample(l: &Layout, flat: &[f64], obs: &[f64], rng: &mut StreamRng) -> Vec<f64> {
    let f = forward(l, flat, obs);
    (0..l.act)
        .map(|j| {
            let z: f64 = StandardNormal.sample(rng);
            f.mean[j] + log_std(l, flat, j).0.exp() * z
        })
        .collect()
}

pub(crate) fn log_prob(l: &Layout, flat: &[f64], obs: &[f64], action: &[f64]) -> f64 {
    let f = forward(l, flat, obs);
    (0..l.act)
        .map(|j| {
            let (s, _) = log_std(l, flat, j);
            let z = (action[j] - f.mean[j]) * (-s).exp();
            -0.5 * z * z - s - HALF_LN_2PI
        })
        .sum()
}

/// Jacobian of the mean head with respect to the flat parameters, one row per
/// action dimension (log_std columns are zero).
fn mean_jacobian(l: &Layout, flat: &[f64], obs: &[f64], f: &Forward) -> Vec<Vec<f64>> {
    let p = l.len();
    let mut jac = vec![vec![0.0; p]; l.act];
    for (j, row) in jac.iter_mut().enumerate() {
        row[l.b2(j)] = 1.0;
        for k in 0..l.hidden {
            row[l.w2(j, k)] = f.hidden[k];
            let back = flat[l.w2(j, k)] * (1.0 - f.hidden[k] * f.hidden[k]);
            row[l.b1(k)] = back;
            for (i, x) in obs.iter().enumerate() {
                row[l.w1(k, i)] = back * x;
            }
        }
    }
    jac
}

pub(crate) fn score(l: &Layout, flat: &[f64], obs: &[f64], action: &[f64]) -> Vec<f64> {
    let f = forward(l, flat, obs);
    let p = l.len();
    let mut g = vec![0.0; p];
    // backprop of sum_j e_j * mu_j, e_j = (u_j - mu_j) / sigma_j^2
    let mut e = vec![0.0; l.act];
    for j in 0..l.act {
        let (s, active) = log_std(l, flat, j);
        let var = (2.0 * s).exp();
        let d = action[j] - f.mean[j];
        e[j] = d / var;
        if active {
            g[l.log_std(j)] = d * d / var - 1.0;
        }
        g[l.b2(j)] = e[j];
        for k in 0..l.hidden {
            g[l.w2(j, k)] = e[j] * f.hidden[k];
        }
    }
    for k in 0..l.hidden {
        let dh: f64 = (0..l.act).map(|j| e[j] * flat[l.w2(j, k)]).sum();
        let dz = dh * (1.0 - f.hidden[k] * f.hidden[k]);
        g[l.b1(k)] = dz;
        for (i, x) in obs.iter().enumerate() {
            g[l.w1(k, i)] = dz * x;
        }
    }
    g
}

/// Hessian of the log-density with respect to the flat parameters.
///
/// With `mu(theta)` the mean head and `s` the log std:
/// `H = sum_j [ -J_j J_j^T / sigma_j^2 + e_j * Hess(mu_j) ]` on the mean block,
/// `d^2/ds_j dtheta = -2 e_j J_j`, `d^2/ds_j^2 = -2 (u_j - mu_j)^2 / sigma_j^2`.
pub(crate) fn log_prob_hessian(l: &Layout, flat: &[f64], obs: &[f64], action: &[f64]) -> DMatrix<f64> {
    let f = forward(l, flat, obs);
    let p = l.len();
    let jac = mean_jacobian(l, flat, obs, &f);
    let mut h = DMatrix::<f64>::zeros(p, p);
    let idx_in = |k: usize| {
        (0..=l.obs).map(move |i| {
            if i < l.obs {
                (l.w1(k, i), i)
            } else {
                (l.b1(k), usize::MAX)
            }
        })
    };

    for j in 0..l.act {
        let (s, active) = log_std(l, flat, j);
        let var = (2.0 * s).exp();
        let d = action[j] - f.mean[j];
        let e = d / var;
        let row = &jac[j];
        let nz: Vec<usize> = (0..p).filter(|&m| row[m] != 0.0).collect();
        for &a in &nz {
            for &b in &nz {
                h[(a, b)] -= row[a] * row[b] / var;
            }
        }
        // e_j * second derivatives of mu_j
        for k in 0..l.hidden {
            let y = f.hidden[k];
            let dy = 1.0 - y * y;
            let ddy = -2.0 * y * dy;
            let w = flat[l.w2(j, k)];
            let wk = l.w2(j, k);
            for (a, ia) in idx_in(k) {
                let xa = if ia == usize::MAX { 1.0 } else { obs[ia] };
                // (W2_jk, W1_ki / b1_k)
                h[(wk, a)] += e * dy * xa;
                h[(a, wk)] += e * dy * xa;
                for (b, ib) in idx_in(k) {
                    let xb = if ib == usize::MAX { 1.0 } else { obs[ib] };
                    h[(a, b)] += e * w * ddy * xa * xb;
                }
            }
        }
        if active {
            let ls = l.log_std(j);
            for &m in &nz {
                h[(ls, m)] -= 2.0 * e * row[m];
                h[(m, ls)] -= 2.0 * e * row[m];
            }
            h[(ls, ls)] -= 2.0 * d * d / var;
        }
    }
    h
}
