//! Empirical probes of the game's structural assumptions: the affine reward
//! relation, the PL inequality and Lipschitz smoothness of gradient blocks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{discounted_return, Game, GameSampler, Player, TrajectorySampler};
use crate::linalg::{norm, sub};
use crate::policy::{meta_gradient, pg_estimate, Baseline, GradientMode, PolicyParams};
use crate::rng::SeedStream;

/// Least-squares fit `r_D = c r_A + d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScFit {
    pub c: f64,
    pub d: f64,
    pub max_abs_residual: f64,
    pub n_samples: usize,
}

impl ScFit {
    /// Whether the fit describes a strictly competitive game: `c < 0` and the
    /// relation holds to `tol`.
    pub fn strictly_competitive(&self, tol: f64) -> bool {
        self.c < 0.0 && self.max_abs_residual <= tol
    }
}

/// Samples `(state, a_D, a_A)` tuples by playing standard-normal raw actions
/// from reset (episode `i` on `stream.index(i)`), keeps the transitions in
/// which the attacker is present, and fits `r_D = c r_A + d`.
pub fn sc_check<G: Game>(game: &G, n_samples: usize, stream: SeedStream) -> Result<ScFit> {
    if n_samples < 10 {
        return Err(Error::validation(format!(
            "sc_check needs n_samples >= 10, got {n_samples}"
        )));
    }
    let h = game.horizon().max(1);
    let per_round = 4 * n_samples.div_ceil(h) + 8;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n_samples);
    let mut next = 0u64;
    for _ in 0..8 {
        let chunk: Vec<Vec<(f64, f64)>> = (next..next + per_round as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream.index(i).rng();
                let mut state = game.reset(&mut rng)?;
                let mut out = Vec::new();
                for _ in 0..game.horizon() {
                    let a_d: Vec<f64> = (0..game.defender_act_dim())
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect();
                    let a_a: Vec<f64> = (0..game.attacker_act_dim())
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect();
                    let a_a = (!a_a.is_empty()).then_some(a_a.as_slice());
                    let tr = game.step(&state, &a_d, a_a, &mut rng)?;
                    if tr.malicious_present {
                        out.push((tr.r_d, tr.r_a));
                    }
                    state = tr.next;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        next += per_round as u64;
        pairs.extend(chunk.into_iter().flatten());
        if pairs.len() >= n_samples {
            break;
        }
    }
    if pairs.len() < n_samples {
        return Err(Error::validation(format!(
            "only {} of {n_samples} sampled rounds had an attacker present",
            pairs.len()
        )));
    }
    pairs.truncate(n_samples);
    fit_affine(&pairs)
}

fn fit_affine(pairs: &[(f64, f64)]) -> Result<ScFit> {
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.1 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.1 - mx) * (p.0 - my)).sum();
    if sxx <= f64::EPSILON * f64::EPSILON * n * (1.0 + mx * mx) {
        return Err(Error::validation("cannot identify c: all sampled r_A are equal"));
    }
    let c = sxy / sxx;
    let d = my - c * mx;
    let max_abs_residual = pairs
        .iter()
        .map(|(y, x)| (y - c * x - d).abs())
        .fold(0.0, f64::max);
    Ok(ScFit {
        c,
        d,
        max_abs_residual,
        n_samples: pairs.len(),
    })
}

/// A scalar objective and its gradient, possibly estimated; `stream` keys
/// any sampling so repeated calls can share randomness.
pub trait Objective: Sync {
    fn value(&self, x: &[f64], stream: SeedStream) -> Result<f64>;
    fn gradient(&self, x: &[f64], stream: SeedStream) -> Result<Vec<f64>>;
}

/// The attacker's discounted return as a function of its own parameters,
/// estimated from `batch_size` rollouts against a frozen defender.
pub struct McAttackerObjective<'g, G: Game> {
    pub game: &'g G,
    pub defender: PolicyParams,
    pub attacker: PolicyParams,
    pub batch_size: usize,
    pub baseline: Baseline,
}

impl<G: Game> McAttackerObjective<'_, G> {
    fn batch(&self, x: &[f64], stream: SeedStream) -> Result<(PolicyParams, Vec<crate::game::Trajectory>)> {
        let phi = self.attacker.with_flat(x.to_vec());
        let batch =
            GameSampler::new(self.game).sample(&self.defender, Some(&phi), self.batch_size, stream)?;
        Ok((phi, batch))
    }
}

impl<G: Game> Objective for McAttackerObjective<'_, G> {
    fn value(&self, x: &[f64], stream: SeedStream) -> Result<f64> {
        let (_, batch) = self.batch(x, stream)?;
        Ok(batch
            .iter()
            .map(|t| discounted_return(t, Player::Attacker))
            .sum::<f64>()
            / batch.len() as f64)
    }

    fn gradient(&self, x: &[f64], stream: SeedStream) -> Result<Vec<f64>> {
        let (phi, batch) = self.batch(x, stream)?;
        Ok(pg_estimate(&batch, &phi, self.baseline)?.vector)
    }
}

fn random_offset(dim: usize, radius: f64, stream: SeedStream) -> Vec<f64> {
    let mut rng = stream.rng();
    let u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = norm(&u);
    let r = radius * (1.0 - rng.random::<f64>());
    if n == 0.0 {
        return vec![0.0; dim];
    }
    u.iter().map(|v| v * r / n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlStatus {
    Valid,
    /// Zero perturbation or zero gap: `0/0`.
    Skipped,
    /// The perturbed point scored higher than the supposed maximizer.
    Invalidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlProbe {
    pub distance: f64,
    pub gap: f64,
    pub grad_norm_sq: f64,
    pub ratio: Option<f64>,
    pub status: PlStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlReport {
    /// Minimum ratio over valid probes.
    pub ratio: Option<f64>,
    pub probes: Vec<PlProbe>,
    pub invalidated: usize,
}

impl PlReport {
    /// A positive ratio with no probe contradicting the maximizer.
    pub fn verified(&self) -> bool {
        self.invalidated == 0 && self.ratio.is_some_and(|r| r > 0.0 && r.is_finite())
    }
}

/// Empirical PL constant of a maximization objective around an approximate
/// maximizer: the minimum over perturbations `phi` (within `radius`) of
/// `|grad f(phi)|^2 / (2 (f(phi_star) - f(phi)))`.
///
/// Probe `i` perturbs with `stream.index(i)`; all values and gradients share
/// `stream.derive("eval")` so Monte-Carlo objectives use common randomness.
pub fn pl_probe(
    objective: &dyn Objective,
    phi_star: &[f64],
    radius: f64,
    n_probes: usize,
    stream: SeedStream,
) -> Result<PlReport> {
    let eval = stream.derive("eval");
    let v_star = objective.value(phi_star, eval)?;
    let probes: Vec<PlProbe> = (0..n_probes as u64)
        .into_par_iter()
        .map(|i| {
            let delta = random_offset(phi_star.len(), radius, stream.index(i));
            let distance = norm(&delta);
            if distance == 0.0 {
                return Ok(PlProbe {
                    distance,
                    gap: 0.0,
                    grad_norm_sq: 0.0,
                    ratio: None,
                    status: PlStatus::Skipped,
                });
            }
            let phi: Vec<f64> = phi_star.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let gap = v_star - objective.value(&phi, eval)?;
            let g = objective.gradient(&phi, eval)?;
            let grad_norm_sq = g.iter().map(|v| v * v).sum::<f64>();
            let (ratio, status) = if gap > 0.0 {
                (Some(grad_norm_sq / (2.0 * gap)), PlStatus::Valid)
            } else if gap == 0.0 {
                (None, PlStatus::Skipped)
            } else {
                (None, PlStatus::Invalidates)
            };
            Ok(PlProbe {
                distance,
                gap,
                grad_norm_sq,
                ratio,
                status,
            })
        })
        .collect::<Result<_>>()?;
    let ratio = probes.iter().filter_map(|p| p.ratio).reduce(f64::min);
    let invalidated = probes
        .iter()
        .filter(|p| p.status == PlStatus::Invalidates)
        .count();
    Ok(PlReport {
        ratio,
        probes,
        invalidated,
    })
}

/// Gradient block and the argument it is differentiated along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LipschitzBlock {
    /// `grad_theta L_D` along `theta`.
    L11,
    /// `grad_theta L_D` along `phi`.
    L12,
    /// `grad_phi L_A` along `theta`.
    L21,
    /// `grad_phi L_A` along `phi`.
    L22,
    /// Gradient of the defender's adapted value along `theta`.
    LV,
}

impl LipschitzBlock {
    pub const ALL: [LipschitzBlock; 5] = [Self::L11, Self::L12, Self::L21, Self::L22, Self::LV];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::L11 => "L11",
            Self::L12 => "L12",
            Self::L21 => "L21",
            Self::L22 => "L22",
            Self::LV => "L_V",
        }
    }

    fn varies_phi(self) -> bool {
        matches!(self, Self::L12 | Self::L22)
    }

    fn needs_phi(self) -> bool {
        !matches!(self, Self::L11 | Self::LV)
    }
}

/// Source of the gradient blocks probed by [`lipschitz_probe`].
pub trait BlockGradients: Sync {
    fn block_gradient(
        &self,
        block: LipschitzBlock,
        theta: &[f64],
        phi: &[f64],
        stream: SeedStream,
    ) -> Result<Vec<f64>>;
}

/// Monte-Carlo blocks on a concrete game. `attacker` is `None` for rule
/// types, which only admit `L11` and `L_V`.
pub struct McBlocks<'g, G: Game> {
    pub game: &'g G,
    pub defender: PolicyParams,
    pub attacker: Option<PolicyParams>,
    pub batch_size: usize,
    pub baseline: Baseline,
    pub eta: f64,
}

impl<G: Game> BlockGradients for McBlocks<'_, G> {
    fn block_gradient(
        &self,
        block: LipschitzBlock,
        theta: &[f64],
        phi: &[f64],
        stream: SeedStream,
    ) -> Result<Vec<f64>> {
        let d = self.defender.with_flat(theta.to_vec());
        let a = self.attacker.as_ref().map(|p| p.with_flat(phi.to_vec()));
        if block.needs_phi() && a.is_none() {
            return Err(Error::Unsupported(format!(
                "{} needs an adaptive attacker",
                block.as_str()
            )));
        }
        let sampler = GameSampler::new(self.game);
        match block {
            LipschitzBlock::LV => Ok(meta_gradient(
                &d,
                a.as_ref(),
                self.eta,
                GradientMode::Full,
                self.batch_size,
                self.baseline,
                &sampler,
                stream,
            )?
            .vector),
            _ => {
                let batch = sampler.sample(&d, a.as_ref(), self.batch_size, stream)?;
                match block {
                    LipschitzBlock::L11 | LipschitzBlock::L12 => {
                        Ok(pg_estimate(&batch, &d, self.baseline)?.vector)
                    }
                    _ => Ok(pg_estimate(&batch, a.as_ref().expect("checked above"), self.baseline)?.vector),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub block: LipschitzBlock,
    /// Max over pairs of `|grad(x') - grad(x)| / |x' - x|`; 0 if every pair
    /// was skipped.
    pub estimate: f64,
    pub pairs_used: usize,
    pub skipped: usize,
}

/// Lower bound on a block's Lipschitz constant from `n_pairs` random pairs
/// `(x, x + delta)`, `|delta| <= radius`. Pair `i` draws `delta` from
/// `stream.index(i)` and evaluates both gradients on
/// `stream.index(i).derive("grad")`, so a larger `n_pairs` only adds pairs.
pub fn lipschitz_probe(
    blocks: &dyn BlockGradients,
    block: LipschitzBlock,
    theta: &[f64],
    phi: &[f64],
    n_pairs: usize,
    radius: f64,
    stream: SeedStream,
) -> Result<LipschitzReport> {
    let ratios: Vec<Option<f64>> = (0..n_pairs as u64)
        .into_par_iter()
        .map(|i| {
            let base = if block.varies_phi() { phi } else { theta };
            let delta = random_offset(base.len(), radius, stream.index(i));
            if norm(&delta) == 0.0 {
                return Ok(None);
            }
            let moved: Vec<f64> = base.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let dist = norm(&sub(&moved, base));
            if dist == 0.0 {
                return Ok(None);
            }
            let gs = stream.index(i).derive("grad");
            let g0 = blocks.block_gradient(block, theta, phi, gs)?;
            let g1 = if block.varies_phi() {
                blocks.block_gradient(block, theta, &moved, gs)?
            } else {
                blocks.block_gradient(block, &moved, phi, gs)?
            };
            Ok(Some(norm(&sub(&g1, &g0)) / dist))
        })
        .collect::<Result<_>>()?;
    let used: Vec<f64> = ratios.iter().flatten().cloned().collect();
    Ok(LipschitzReport {
        block,
        estimate: used.iter().cloned().fold(0.0, f64::max),
        pairs_used: used.len(),
        skipped: ratios.len() - used.len(),
    })
}
