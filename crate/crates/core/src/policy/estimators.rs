//! Score-function estimators of value gradients and Hessians, the one-step
//! adaptation map, and the meta-gradient of the adapted objective.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PolicyParams;
use crate::error::{Error, Result};
use crate::game::{discounted_return, Player, Trajectory, TrajectorySampler};
use crate::linalg::{axpy, mean_and_variance, pairwise_sum, pairwise_sum_scalar};
use crate::rng::SeedStream;

/// Largest parameter dimension for which dense Hessians are formed.
pub const HESSIAN_DIM_CAP: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    /// Subtract the batch-mean return from every trajectory's return.
    MeanReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Gradient at the adapted parameters only (first-order).
    #[default]
    Reptile,
    /// Chain rule through the adaptation step.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub vector: Vec<f64>,
    pub batch_size: usize,
    /// Per-coordinate sample variance of the per-trajectory terms.
    pub variance: Vec<f64>,
}

impl GradEstimate {
    /// Per-coordinate standard error of the mean.
    pub fn std_error(&self) -> Vec<f64> {
        self.variance
            .iter()
            .map(|v| (v / self.batch_size as f64).sqrt())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.vector)
    }
}

fn check_batch(batch: &[Trajectory], params: &PolicyParams) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("trajectory batch"));
    }
    let expected = params.digest();
    for tau in batch {
        match tau.digest(params.player) {
            Some(found) if found == expected => {}
            Some(found) => return Err(Error::OffPolicy { expected, found }),
            None => {
                return Err(Error::MissingLogProb(params.player.as_str()));
            }
        }
    }
    Ok(())
}

/// `sum_t grad log pi(a_t | s_t)` over one trajectory.
pub fn trajectory_score(tau: &Trajectory, params: &PolicyParams) -> Vec<f64> {
    let who = params.player;
    let mut total = vec![0.0; params.dim()];
    for s in tau.steps() {
        let g = params.score(s.obs(who), s.action(who));
        axpy(1.0, &g, &mut total);
    }
    total
}

/// `sum_t Hess log pi(a_t | s_t)` over one trajectory.
pub fn trajectory_log_prob_hessian(tau: &Trajectory, params: &PolicyParams) -> DMatrix<f64> {
    let who = params.player;
    let n = params.dim();
    let mut total = DMatrix::zeros(n, n);
    for s in tau.steps() {
        total += params.log_prob_hessian(s.obs(who), s.action(who));
    }
    total
}

fn returns(batch: &[Trajectory], who: Player) -> Vec<f64> {
    batch.iter().map(|t| discounted_return(t, who)).collect()
}

fn baseline_value(rets: &[f64], baseline: Baseline) -> f64 {
    match baseline {
        Baseline::None => 0.0,
        Baseline::MeanReturn => pairwise_sum_scalar(rets) / rets.len() as f64,
    }
}

/// Monte-Carlo policy gradient `(1/N) sum_i [sum_t score_t] (R(tau_i) - b)`
/// for the player that owns `params`.
pub fn pg_estimate(batch: &[Trajectory], params: &PolicyParams, baseline: Baseline) -> Result<GradEstimate> {
    check_batch(batch, params)?;
    let rets = returns(batch, params.player);
    let b = baseline_value(&rets, baseline);
    let terms: Vec<Vec<f64>> = batch
        .par_iter()
        .zip(rets.par_iter())
        .map(|(tau, r)| {
            let mut s = trajectory_score(tau, params);
            let w = r - b;
            for v in &mut s {
                *v *= w;
            }
            s
        })
        .collect();
    let (vector, variance) = mean_and_variance(&terms, params.dim());
    Ok(GradEstimate {
        vector,
        batch_size: batch.len(),
        variance,
    })
}

/// The two pieces of the Hessian estimator:
/// `outer = (1/N) sum_i g_i s_i^T` and `curvature = (1/N) sum_i (R_i - b) Hess log q(tau_i)`,
/// where `s_i` is the trajectory score and `g_i = (R_i - b) s_i`.
/// `curvature` is the derivative of the gradient estimator itself with the
/// sampled trajectories held fixed.
#[derive(Debug, Clone)]
pub struct HessianParts {
    pub outer: DMatrix<f64>,
    pub curvature: DMatrix<f64>,
}

impl HessianParts {
    pub fn total(&self) -> DMatrix<f64> {
        &self.outer + &self.curvature
    }
}

fn check_hessian_dim(params: &PolicyParams) -> Result<()> {
    if params.dim() > HESSIAN_DIM_CAP {
        return Err(Error::Unsupported(format!(
            "dense Hessian of a {}-parameter policy exceeds the cap of {HESSIAN_DIM_CAP}; \
             shrink the policy (Hessian-vector products are not provided)",
            params.dim()
        )));
    }
    Ok(())
}

pub fn hessian_parts(
    batch: &[Trajectory],
    params: &PolicyParams,
    baseline: Baseline,
) -> Result<HessianParts> {
    check_hessian_dim(params)?;
    check_batch(batch, params)?;
    let n = params.dim();
    let rets = returns(batch, params.player);
    let b = baseline_value(&rets, baseline);
    let per: Vec<(DMatrix<f64>, DMatrix<f64>)> = batch
        .par_iter()
        .zip(rets.par_iter())
        .map(|(tau, r)| {
            let w = r - b;
            let s = nalgebra::DVector::from_vec(trajectory_score(tau, params));
            let outer = (&s * s.transpose()) * w;
            let curv = trajectory_log_prob_hessian(tau, params) * w;
            (outer, curv)
        })
        .collect();
    let mut outer = DMatrix::zeros(n, n);
    let mut curvature = DMatrix::zeros(n, n);
    for (o, c) in &per {
        outer += o;
        curvature += c;
    }
    let inv = 1.0 / batch.len() as f64;
    Ok(HessianParts {
        outer: outer * inv,
        curvature: curvature * inv,
    })
}

/// Sample estimate of the value Hessian,
/// `(1/N) sum_i [g(tau_i) grad log q(tau_i)^T + grad g(tau_i)]`.
pub fn hessian_estimate(batch: &[Trajectory], params: &PolicyParams) -> Result<DMatrix<f64>> {
    Ok(hessian_parts(batch, params, Baseline::None)?.total())
}

/// One-step adaptation `theta' = theta + eta * pg_estimate(batch, theta)`.
pub fn adapt(
    theta: &PolicyParams,
    batch: &[Trajectory],
    eta: f64,
    baseline: Baseline,
) -> Result<PolicyParams> {
    if !(eta >= 0.0) {
        return Err(Error::validation(format!("adaptation step {eta} must be >= 0")));
    }
    let g = pg_estimate(batch, theta, baseline)?;
    let mut flat = theta.flat.clone();
    axpy(eta, &g.vector, &mut flat);
    Ok(theta.with_flat(flat))
}

/// `l` adaptation steps, re-sampling a fresh batch under the current
/// parameters before each step. Batch `k` draws from `stream.index(k)`.
#[allow(clippy::too_many_arguments)]
pub fn adapt_steps(
    theta: &PolicyParams,
    attacker: Option<&PolicyParams>,
    sampler: &dyn TrajectorySampler,
    steps: usize,
    eta: f64,
    batch_size: usize,
    baseline: Baseline,
    stream: SeedStream,
) -> Result<PolicyParams> {
    let mut cur = theta.clone();
    for k in 0..steps {
        let batch = sampler.sample(&cur, attacker, batch_size, stream.index(k as u64))?;
        cur = adapt(&cur, &batch, eta, baseline)?;
    }
    Ok(cur)
}

fn log_q(tau: &Trajectory, params: &PolicyParams) -> f64 {
    let who = params.player;
    tau.steps()
        .iter()
        .map(|s| params.log_prob(s.obs(who), s.action(who)))
        .sum()
}

/// `sum_i s_i (P - P_i)`; see [`meta_gradient`].
#[allow(clippy::too_many_arguments)]
fn distribution_term(
    theta: &PolicyParams,
    adapted: &PolicyParams,
    round1: &[Trajectory],
    rets1: &[f64],
    round2: &[Trajectory],
    rets2: &[f64],
    eta: f64,
    baseline: Baseline,
) -> Vec<f64> {
    let n1 = round1.len();
    let n2 = round2.len() as f64;
    let dim = theta.dim();
    let scores: Vec<Vec<f64>> = round1.par_iter().map(|t| trajectory_score(t, theta)).collect();
    let sum_r = pairwise_sum_scalar(rets1);
    let sum_s = pairwise_sum(&scores, dim);
    let weighted: Vec<Vec<f64>> = scores
        .iter()
        .zip(rets1)
        .map(|(s, r)| s.iter().map(|v| v * r).collect())
        .collect();
    let sum_sr = pairwise_sum(&weighted, dim);
    let base_logq: Vec<f64> = round2.par_iter().map(|t| log_q(t, adapted)).collect();
    // E[1 - w_j] = 0 under theta', so a control variate that does not depend
    // on tau_j can be subtracted from r_j without bias.
    let centered: Vec<f64> = if baseline == Baseline::MeanReturn && rets2.len() > 1 {
        let sum2 = pairwise_sum_scalar(rets2);
        rets2.iter().map(|r| r - (sum2 - r) / (n2 - 1.0)).collect()
    } else {
        rets2.to_vec()
    };

    let terms: Vec<Vec<f64>> = (0..n1)
        .into_par_iter()
        .map(|i| {
            let s_i = &scores[i];
            let r_i = rets1[i];
            // theta'_i = theta + (eta / N) sum_{j != i} s_j (R_j - b_i)
            let mut step: Vec<f64> = sum_sr.iter().zip(s_i).map(|(a, s)| a - s * r_i).collect();
            if baseline == Baseline::MeanReturn && n1 > 1 {
                let b_i = (sum_r - r_i) / (n1 - 1) as f64;
                for ((v, st), si) in step.iter_mut().zip(&sum_s).zip(s_i) {
                    *v -= b_i * (st - si);
                }
            }
            let mut flat = theta.flat.clone();
            axpy(eta / n1 as f64, &step, &mut flat);
            let loo = theta.with_flat(flat);
            let diff: f64 = round2
                .iter()
                .zip(&centered)
                .zip(&base_logq)
                .map(|((t, r), lq)| (1.0 - (log_q(t, &loo) - lq).exp()) * r)
                .sum::<f64>()
                / n2;
            s_i.iter().map(|v| v * diff).collect()
        })
        .collect();
    pairwise_sum(&terms, dim)
}

#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub vector: Vec<f64>,
    /// Parameters after the one-step adaptation on the first-round batch.
    pub adapted: PolicyParams,
    /// Mean defender return of the first-round (pre-adaptation) batch.
    pub pre_return: f64,
    /// Mean defender return of the second-round batch under the adapted parameters.
    pub post_return: f64,
    pub first_round: Vec<Trajectory>,
    pub second_round: Vec<Trajectory>,
}

/// Gradient of the adapted objective `E_tau J(theta + eta * grad_hat J(tau))`
/// for the defender, with the attacker held at `attacker`.
///
/// Two rounds of sampling: round one (`stream.derive("round1")`) under `theta`
/// produces the adaptation `theta'` and, in full mode, the curvature term;
/// round two (`stream.derive("round2")`) under `theta'` gives `grad_hat J(theta')`.
///
/// Full mode returns `(I + eta * C)^T grad_hat J(theta') + D`, where `C` is
/// the derivative of the round-one gradient estimate with the round-one
/// trajectories held fixed ([`HessianParts::curvature`]) and `D` estimates
/// the term from differentiating the round-one sampling distribution,
/// `E[sum_i grad log q(tau_i) J(theta')]`.
///
/// `D = sum_i s_i (P - P_i)`: `P` is the mean round-two return and `P_i`
/// an importance-weighted round-two estimate of `J(theta'_i)`, where
/// `theta'_i` is the adaptation computed without `tau_i`. Because `theta'_i`
/// does not depend on `tau_i`, `E[s_i P_i] = 0` and the estimator stays
/// unbiased. With the mean-return baseline each round-two return is
/// centered by the mean of the others before weighting. Since `theta'_i` is close to `theta'`, `P - P_i` is small and
/// the term's variance shrinks with the batch size. With `eta == 0` the
/// objective no longer depends on round one and `D` is omitted.
///
/// Reptile mode returns `grad_hat J(theta')` alone.
#[allow(clippy::too_many_arguments)]
pub fn meta_gradient(
    theta: &PolicyParams,
    attacker: Option<&PolicyParams>,
    eta: f64,
    mode: GradientMode,
    batch_size: usize,
    baseline: Baseline,
    sampler: &dyn TrajectorySampler,
    stream: SeedStream,
) -> Result<MetaGradient> {
    if mode == GradientMode::Full {
        check_hessian_dim(theta)?;
    }
    let round1 = sampler.sample(theta, attacker, batch_size, stream.derive("round1"))?;
    let g1 = pg_estimate(&round1, theta, baseline)?;
    let mut adapted_flat = theta.flat.clone();
    axpy(eta, &g1.vector, &mut adapted_flat);
    let adapted = theta.with_flat(adapted_flat);

    let round2 = sampler.sample(&adapted, attacker, batch_size, stream.derive("round2"))?;
    let g2 = pg_estimate(&round2, &adapted, baseline)?;
    let rets1 = returns(&round1, theta.player);
    let rets2 = returns(&round2, theta.player);
    let pre_return = pairwise_sum_scalar(&rets1) / rets1.len() as f64;
    let post_return = pairwise_sum_scalar(&rets2) / rets2.len() as f64;

    let vector = match mode {
        GradientMode::Reptile => g2.vector,
        GradientMode::Full if eta == 0.0 => g2.vector,
        GradientMode::Full => {
            let parts = hessian_parts(&round1, theta, baseline)?;
            let g2v = nalgebra::DVector::from_column_slice(&g2.vector);
            let corr = parts.curvature.transpose() * &g2v;
            let mut total: Vec<f64> = g2.vector.clone();
            axpy(eta, corr.as_slice(), &mut total);

            let dist = distribution_term(theta, &adapted, &round1, &rets1, &round2, &rets2, eta, baseline);
            axpy(1.0, &dist, &mut total);
            total
        }
    };
    Ok(MetaGradient {
        vector,
        adapted,
        pre_return,
        post_return,
        first_round: round1,
        second_round: round2,
    })
}
