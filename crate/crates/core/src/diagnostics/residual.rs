//! First-order stationarity residuals of the meta-Stackelberg game.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{AttackTypeSpec, GameFamily, GameSampler, TypePrior};
use crate::linalg::{dot, norm};
use crate::policy::{meta_gradient, pg_estimate, Baseline, GradientMode, PolicyParams};
use crate::rng::SeedStream;

/// One replicate's gradients for one type: id, defender, attacker.
type TypeDraw = (u32, Vec<f64>, Option<Vec<f64>>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualConfig {
    /// Trajectories per round of each meta-gradient estimate.
    pub batch_size: usize,
    /// Independent estimates averaged per type.
    pub replicates: usize,
    pub baseline: Baseline,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            replicates: 8,
            baseline: Baseline::MeanReturn,
        }
    }
}

/// Residual norms with their delta-method standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualEstimate {
    /// `|| sum_xi Q(xi) grad ||` of the replicate-averaged gradient.
    pub defender: f64,
    pub defender_se: f64,
    /// Square root of the unbiased estimate of the squared norm (clamped at
    /// zero); removes the noise floor `tr(Cov)/R` that inflates `defender`.
    pub defender_debiased: f64,
    /// Type id to `(residual, se)` for adaptive types.
    pub per_type: BTreeMap<u32, (f64, f64)>,
    pub mean_gradient: Vec<f64>,
}

/// Per-type gradient estimates the residual is assembled from. The stand-in
/// game implements this with closed forms.
pub trait ResidualOracle: Sync {
    /// Defender meta-gradient and, for adaptive types, the attacker's
    /// gradient, from one independent draw keyed by `stream`.
    fn gradients(
        &self,
        ty: &AttackTypeSpec,
        theta: &PolicyParams,
        phi: Option<&PolicyParams>,
        stream: SeedStream,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)>;
}

struct NormStats {
    norm: f64,
    se: f64,
    debiased: f64,
    mean: Vec<f64>,
}

fn norm_stats(samples: &[Vec<f64>]) -> NormStats {
    let r = samples.len();
    let dim = samples[0].len();
    let mut sum = vec![0.0; dim];
    for s in samples {
        for (a, b) in sum.iter_mut().zip(s) {
            *a += b;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / r as f64).collect();
    let n = norm(&mean);
    if r < 2 {
        return NormStats {
            norm: n,
            se: 0.0,
            debiased: n,
            mean,
        };
    }
    let se = if n > 0.0 {
        let proj: Vec<f64> = samples.iter().map(|s| dot(s, &mean) / n).collect();
        let m = proj.iter().sum::<f64>() / r as f64;
        let var = proj.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (r as f64 - 1.0);
        (var / r as f64).sqrt()
    } else {
        0.0
    };
    let sq_sum: f64 = samples.iter().map(|s| dot(s, s)).sum();
    let u = (dot(&sum, &sum) - sq_sum) / (r as f64 * (r as f64 - 1.0));
    NormStats {
        norm: n,
        se,
        debiased: u.max(0.0).sqrt(),
        mean,
    }
}

/// Residuals from any [`ResidualOracle`]: replicate `r` evaluates every type
/// of the prior on `stream.index(r).index(type id)`.
pub fn fose_residual_with(
    oracle: &dyn ResidualOracle,
    theta: &PolicyParams,
    phis: &BTreeMap<u32, PolicyParams>,
    prior: &TypePrior,
    replicates: usize,
    stream: SeedStream,
) -> Result<ResidualEstimate> {
    if replicates == 0 {
        return Err(Error::validation("residual needs at least one replicate"));
    }
    let specs: Vec<(&AttackTypeSpec, f64)> = prior
        .specs()
        .map(|t| (t, prior.prob(t.id).unwrap_or(0.0)))
        .collect();
    let draws: Vec<Vec<TypeDraw>> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            specs
                .iter()
                .map(|(ty, _)| {
                    let phi = if ty.is_adaptive() {
                        Some(phis.get(&ty.id).ok_or_else(|| {
                            Error::validation(format!("no attacker policy for adaptive type {}", ty.id))
                        })?)
                    } else {
                        None
                    };
                    let (g, ga) = oracle.gradients(ty, theta, phi, stream.index(r).index(ty.id as u64))?;
                    Ok((ty.id, g, ga))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let defender_samples: Vec<Vec<f64>> = draws
        .iter()
        .map(|rep| {
            let mut acc = vec![0.0; theta.dim()];
            for ((_, g, _), (_, q)) in rep.iter().zip(&specs) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += q * b;
                }
            }
            acc
        })
        .collect();
    let d = norm_stats(&defender_samples);

    let mut per_type = BTreeMap::new();
    for (k, (ty, _)) in specs.iter().enumerate() {
        let samples: Vec<Vec<f64>> = draws.iter().filter_map(|rep| rep[k].2.clone()).collect();
        if !samples.is_empty() {
            let s = norm_stats(&samples);
            per_type.insert(ty.id, (s.norm, s.se));
        }
    }
    Ok(ResidualEstimate {
        defender: d.norm,
        defender_se: d.se,
        defender_debiased: d.debiased,
        per_type,
        mean_gradient: d.mean,
    })
}

/// Monte-Carlo oracle: full-mode meta-gradients on the family's games; the
/// attacker gradient comes from the second-round batch, i.e. against the
/// adapted defender the attacker actually faces.
pub struct McResidualOracle<G> {
    pub games: BTreeMap<u32, G>,
    pub eta: f64,
    pub batch_size: usize,
    pub baseline: Baseline,
}

impl<G: crate::game::Game> McResidualOracle<G> {
    pub fn new<F: GameFamily<Game = G>>(
        family: &F,
        prior: &TypePrior,
        eta: f64,
        cfg: &ResidualConfig,
    ) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::validation("residual batch_size must be >= 1"));
        }
        let games = prior
            .specs()
            .map(|t| Ok((t.id, family.instantiate(t)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            games,
            eta,
            batch_size: cfg.batch_size,
            baseline: cfg.baseline,
        })
    }
}

impl<G: crate::game::Game> ResidualOracle for McResidualOracle<G> {
    fn gradients(
        &self,
        ty: &AttackTypeSpec,
        theta: &PolicyParams,
        phi: Option<&PolicyParams>,
        stream: SeedStream,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let game = self
            .games
            .get(&ty.id)
            .ok_or_else(|| Error::validation(format!("unknown type {}", ty.id)))?;
        let sampler = GameSampler::new(game);
        let mg = meta_gradient(
            theta,
            phi,
            self.eta,
            GradientMode::Full,
            self.batch_size,
            self.baseline,
            &sampler,
            stream,
        )?;
        let ga = match phi {
            Some(p) => Some(pg_estimate(&mg.second_round, p, self.baseline)?.vector),
            None => None,
        };
        Ok((mg.vector, ga))
    }
}

/// Defender residual `|| E_Q grad L_D ||` (full-mode meta-gradient with
/// adaptation step `eta`) and per-type attacker residuals, estimated with
/// `cfg.replicates` independent batches.
pub fn fose_residual<F: GameFamily>(
    theta: &PolicyParams,
    phis: &BTreeMap<u32, PolicyParams>,
    prior: &TypePrior,
    family: &F,
    eta: f64,
    cfg: &ResidualConfig,
    stream: SeedStream,
) -> Result<ResidualEstimate> {
    let oracle = McResidualOracle::new(family, prior, eta, cfg)?;
    fose_residual_with(&oracle, theta, phis, prior, cfg.replicates, stream)
}
