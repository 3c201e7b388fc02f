//! Training loops: Reptile meta-RL against rulebook attacks, meta-Stackelberg
//! learning with an inner attacker best response, the non-adaptive Bayesian
//! Stackelberg baseline, and online adaptation.
//!
//! Randomness is keyed so that runs are reproducible independently of thread
//! count. Iteration `t` draws its types from `types.index(t)`; type slot `j`
//! of that iteration uses `iter.index(t).index(j)` and derives `"adapt"`,
//! `"attacker"` and `"grad"` streams from it.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{fose_residual, DiagnosticRecord, ResidualConfig};
use crate::error::{Error, Result};
use crate::game::{
    discounted_return, sample_type, AttackTypeSpec, Game, GameFamily, GameSampler, Player, Trajectory,
    TrajectorySampler, TypePrior,
};
use crate::linalg::{axpy, pairwise_sum};
use crate::policy::{
    adapt, adapt_steps, meta_gradient, pg_estimate, Arch, Baseline, GradientMode, PolicyParams,
};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Types sampled per iteration; `None` means `min(4, |prior|)`.
    pub k_types: Option<usize>,
    /// Inner adaptation steps `l` of Reptile meta-RL.
    pub adapt_steps: usize,
    /// Outer iterations `N_D`.
    pub iterations: usize,
    /// Attacker best-response steps `N_A`.
    pub attacker_steps: usize,
    /// Trajectories per estimate `N_b`.
    pub batch_size: usize,
    /// Adaptation step `eta`.
    pub eta: f64,
    /// Inner step of Reptile meta-RL.
    pub kappa: f64,
    pub kappa_a: f64,
    pub kappa_d: f64,
    pub mode: GradientMode,
    pub baseline: Baseline,
    #[serde(with = "crate::rng::seed_serde")]
    pub seed: u64,
    pub hidden: usize,
    pub init_log_std: f64,
    /// Compute the FOSE residual every this many iterations (and at the
    /// first and last); `0` disables it. Set from the run's diagnostics
    /// section rather than serialized here.
    #[serde(skip)]
    pub residual_every: usize,
    #[serde(skip)]
    pub residual: ResidualConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            k_types: None,
            adapt_steps: 1,
            iterations: 100,
            attacker_steps: 10,
            batch_size: 16,
            eta: 0.01,
            kappa: 0.001,
            kappa_a: 0.001,
            kappa_d: 0.001,
            mode: GradientMode::Reptile,
            baseline: Baseline::MeanReturn,
            seed: 0,
            hidden: 32,
            init_log_std: -0.5,
            residual_every: 0,
            residual: ResidualConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::validation(
                "iterations, batch_size and hidden must be >= 1",
            ));
        }
        if self.k_types == Some(0) {
            return Err(Error::validation("k_types must be >= 1"));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("kappa", self.kappa),
            ("kappa_a", self.kappa_a),
            ("kappa_d", self.kappa_d),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn k_for(&self, prior: &TypePrior) -> usize {
        self.k_types.unwrap_or_else(|| prior.len().min(4))
    }
}

/// Meta-policy, per-type attacker policies and the diagnostic history.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub theta: PolicyParams,
    /// Attacker policies of the adaptive types, keyed by type id. Rulebook
    /// types act through their fixed rule and have no entry.
    pub phis: BTreeMap<u32, PolicyParams>,
    pub iteration: usize,
    pub residual_history: Vec<DiagnosticRecord>,
}

impl MetaState {
    /// Fresh policies sized for the family's games. The defender draws from
    /// `policy-init/defender`, the attacker of type `id` from
    /// `policy-init/attacker/id`.
    pub fn init<F: GameFamily>(cfg: &MetaConfig, prior: &TypePrior, family: &F) -> Result<Self> {
        cfg.validate()?;
        prior.validate()?;
        let first = prior.specs().next().ok_or(Error::Empty("type prior"))?;
        let game = family.instantiate(first)?;
        let init = SeedStream::root(cfg.seed).derive("policy-init");
        let d_arch = Arch::mlp(game.defender_obs_dim(), cfg.hidden, game.defender_act_dim());
        let theta = PolicyParams::init(
            Player::Defender,
            d_arch,
            cfg.init_log_std,
            init.derive("defender"),
        );
        let mut phis = BTreeMap::new();
        for ty in prior.specs().filter(|t| t.is_adaptive()) {
            let g = family.instantiate(ty)?;
            let a_arch = Arch::mlp(g.attacker_obs_dim(), cfg.hidden, g.attacker_act_dim());
            phis.insert(
                ty.id,
                PolicyParams::init(
                    Player::Attacker,
                    a_arch,
                    cfg.init_log_std,
                    init.derive("attacker").index(ty.id as u64),
                ),
            );
        }
        Ok(Self {
            theta,
            phis,
            iteration: 0,
            residual_history: Vec::new(),
        })
    }

    /// The attacker policy type `ty` plays, if it is adaptive.
    pub fn attacker_for(&self, ty: &AttackTypeSpec) -> Result<Option<&PolicyParams>> {
        if !ty.is_adaptive() {
            return Ok(None);
        }
        self.phis
            .get(&ty.id)
            .map(Some)
            .ok_or_else(|| Error::validation(format!("no attacker policy for adaptive type {}", ty.id)))
    }
}

/// Per-iteration summary handed to observers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IterationReport {
    /// 1-based iteration number.
    pub iteration: usize,
    pub sampled_types: Vec<u32>,
    /// Mean discounted defender return of the batches the defender gradient
    /// was estimated from.
    pub defender_return: f64,
    /// Mean per-step rewards over those batches.
    pub r_d_mean: f64,
    pub r_a_mean: f64,
    pub clean_loss: Option<f64>,
    pub clean_acc: Option<f64>,
    pub backdoor_acc: Option<f64>,
    pub residual: Option<DiagnosticRecord>,
    pub wallclock_s: f64,
}

/// Called after every outer iteration with the report and the new state.
pub type Observer<'a> = dyn FnMut(&IterationReport, &MetaState) -> Result<()> + 'a;

fn streams(cfg: &MetaConfig) -> (SeedStream, SeedStream) {
    let root = SeedStream::root(cfg.seed);
    (root.derive("types"), root.derive("iter"))
}

fn sample_types(prior: &TypePrior, k: usize, stream: SeedStream) -> Result<Vec<&AttackTypeSpec>> {
    let mut rng = stream.rng();
    (0..k).map(|_| sample_type(prior, &mut rng)).collect()
}

/// `theta + (1/K) sum_j (candidate_j - theta)`, reduced in fixed order.
///
/// With a single candidate the result is that candidate, bit for bit.
pub fn outer_update(theta: &PolicyParams, candidates: &[Vec<f64>]) -> PolicyParams {
    if let [only] = candidates {
        return theta.with_flat(only.clone());
    }
    let deltas: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| c.iter().zip(&theta.flat).map(|(a, b)| a - b).collect())
        .collect();
    let sum = pairwise_sum(&deltas, theta.dim());
    let mut flat = theta.flat.clone();
    axpy(1.0 / candidates.len() as f64, &sum, &mut flat);
    theta.with_flat(flat)
}

fn check_finite(p: &PolicyParams, iteration: usize) -> Result<()> {
    if p.flat.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{} parameters at iteration {iteration}",
            p.player.as_str()
        )))
    }
}

#[derive(Default)]
struct BatchStats {
    ret: Vec<f64>,
    r_d: Vec<f64>,
    r_a: Vec<f64>,
    loss: Vec<f64>,
    acc: Vec<f64>,
    bd: Vec<f64>,
}

impl BatchStats {
    fn add(&mut self, batch: &[Trajectory]) {
        for t in batch {
            self.ret.push(discounted_return(t, Player::Defender));
            let h = t.horizon() as f64;
            self.r_d.push(t.steps().iter().map(|s| s.r_d).sum::<f64>() / h);
            self.r_a.push(t.steps().iter().map(|s| s.r_a).sum::<f64>() / h);
            self.loss.extend(t.summary.clean_loss);
            self.acc.extend(t.summary.clean_acc);
            self.bd.extend(t.summary.backdoor_acc);
        }
    }

    fn report(&self, iteration: usize, sampled_types: Vec<u32>) -> IterationReport {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        IterationReport {
            iteration,
            sampled_types,
            defender_return: mean(&self.ret).unwrap_or(0.0),
            r_d_mean: mean(&self.r_d).unwrap_or(0.0),
            r_a_mean: mean(&self.r_a).unwrap_or(0.0),
            clean_loss: mean(&self.loss),
            clean_acc: mean(&self.acc),
            backdoor_acc: mean(&self.bd),
            residual: None,
            wallclock_s: 0.0,
        }
    }
}

/// Reptile meta-RL with `l`-step adaptation against rulebook attacks.
pub fn reptile_meta_rl<F: GameFamily>(
    cfg: &MetaConfig,
    prior: &TypePrior,
    family: &F,
    theta0: &PolicyParams,
    observer: Option<&mut Observer<'_>>,
) -> Result<PolicyParams> {
    cfg.validate()?;
    prior.validate()?;
    if let Some(t) = prior.specs().find(|t| t.is_adaptive()) {
        return Err(Error::validation(format!(
            "type {} is adaptive; Reptile meta-RL only handles rulebook attacks, use meta-SL",
            t.id
        )));
    }
    let games: BTreeMap<u32, F::Game> = prior
        .specs()
        .map(|t| Ok((t.id, family.instantiate(t)?)))
        .collect::<Result<_>>()?;
    let (types_s, iter_s) = streams(cfg);
    let k = cfg.k_for(prior);
    let mut theta = theta0.clone();
    let mut observer = observer;
    let start = Instant::now();
    for t in 0..cfg.iterations {
        let types = sample_types(prior, k, types_s.index(t as u64))?;
        let results: Vec<Vec<f64>> = types
            .par_iter()
            .enumerate()
            .map(|(j, ty)| {
                let sampler = GameSampler::new(&games[&ty.id]);
                let s = iter_s.index(t as u64).index(j as u64);
                let adapted = adapt_steps(
                    &theta,
                    None,
                    &sampler,
                    cfg.adapt_steps,
                    cfg.kappa,
                    cfg.batch_size,
                    cfg.baseline,
                    s.derive("grad"),
                )?;
                Ok(adapted.flat)
            })
            .collect::<Result<_>>()?;
        theta = outer_update(&theta, &results);
        check_finite(&theta, t + 1)?;
        if let Some(obs) = observer.as_deref_mut() {
            let report = IterationReport {
                iteration: t + 1,
                sampled_types: types.iter().map(|t| t.id).collect(),
                wallclock_s: start.elapsed().as_secs_f64(),
                ..Default::default()
            };
            let state = MetaState {
                theta: theta.clone(),
                phis: BTreeMap::new(),
                iteration: t + 1,
                residual_history: Vec::new(),
            };
            obs(&report, &state)?;
        }
    }
    Ok(theta)
}

/// Result of an attacker best-response run.
#[derive(Debug, Clone)]
pub struct BestResponse {
    pub phi: PolicyParams,
    /// Mean discounted attacker return of each step's batch.
    pub returns: Vec<f64>,
    /// Norm of each step's attacker gradient estimate.
    pub grad_norms: Vec<f64>,
}

/// `steps` policy-gradient ascent steps on the attacker's value with the
/// defender frozen; returns the last iterate. Step `k` samples from
/// `stream.index(k)`.
#[allow(clippy::too_many_arguments)]
pub fn best_response(
    theta_adapted: &PolicyParams,
    phi0: &PolicyParams,
    sampler: &dyn TrajectorySampler,
    steps: usize,
    kappa_a: f64,
    batch_size: usize,
    baseline: Baseline,
    stream: SeedStream,
) -> Result<BestResponse> {
    let mut phi = phi0.clone();
    let mut returns = Vec::with_capacity(steps);
    let mut grad_norms = Vec::with_capacity(steps);
    for k in 0..steps {
        let batch = sampler.sample(theta_adapted, Some(&phi), batch_size, stream.index(k as u64))?;
        returns.push(
            batch
                .iter()
                .map(|t| discounted_return(t, Player::Attacker))
                .sum::<f64>()
                / batch.len() as f64,
        );
        let g = pg_estimate(&batch, &phi, baseline)?;
        grad_norms.push(g.norm());
        let mut flat = phi.flat.clone();
        axpy(kappa_a, &g.vector, &mut flat);
        phi = phi.with_flat(flat);
    }
    Ok(BestResponse {
        phi,
        returns,
        grad_norms,
    })
}

struct TypeOutcome {
    theta_bar: Vec<f64>,
    phi: Option<(u32, PolicyParams)>,
    batch: Vec<Trajectory>,
}

/// One sampled type's share of a meta-SL iteration.
fn meta_sl_type<G: Game>(
    cfg: &MetaConfig,
    theta: &PolicyParams,
    phi: Option<&PolicyParams>,
    ty: &AttackTypeSpec,
    game: &G,
    s: SeedStream,
) -> Result<TypeOutcome> {
    let sampler = GameSampler::new(game);
    let adapted = if cfg.eta == 0.0 {
        theta.clone()
    } else {
        let batch = sampler.sample(theta, phi, cfg.batch_size, s.derive("adapt"))?;
        adapt(theta, &batch, cfg.eta, cfg.baseline)?
    };
    let phi_new = match phi {
        Some(p) => Some(
            best_response(
                &adapted,
                p,
                &sampler,
                cfg.attacker_steps,
                cfg.kappa_a,
                cfg.batch_size,
                cfg.baseline,
                s.derive("attacker"),
            )?
            .phi,
        ),
        None => None,
    };
    let (grad, batch) = match cfg.mode {
        GradientMode::Reptile => {
            let batch = sampler.sample(
                &adapted,
                phi_new.as_ref(),
                cfg.batch_size,
                s.derive("grad").index(0),
            )?;
            (pg_estimate(&batch, &adapted, cfg.baseline)?.vector, batch)
        }
        GradientMode::Full => {
            let mg = meta_gradient(
                theta,
                phi_new.as_ref(),
                cfg.eta,
                GradientMode::Full,
                cfg.batch_size,
                cfg.baseline,
                &sampler,
                s.derive("grad"),
            )?;
            (mg.vector, mg.second_round)
        }
    };
    let mut theta_bar = theta.flat.clone();
    axpy(cfg.kappa_d, &grad, &mut theta_bar);
    Ok(TypeOutcome {
        theta_bar,
        phi: phi_new.map(|p| (ty.id, p)),
        batch,
    })
}

/// Meta-Stackelberg learning with one-step adaptation, starting from `state`.
///
/// Per sampled type: adapt `theta` with one gradient step of size `eta`; run
/// the attacker's best response against the adapted defender (adaptive types
/// only); estimate the defender gradient (at the adapted policy in reptile
/// mode, through the adaptation in full mode); form
/// `theta_bar = theta + kappa_d * grad`. The new meta-policy is the average of
/// the `theta_bar`s and each sampled attacker keeps its last iterate. When a
/// type is drawn more than once in an iteration, the last draw's attacker is
/// kept.
pub fn meta_sl<F: GameFamily>(
    cfg: &MetaConfig,
    prior: &TypePrior,
    family: &F,
    state: MetaState,
    observer: Option<&mut Observer<'_>>,
) -> Result<MetaState> {
    cfg.validate()?;
    prior.validate()?;
    let games: BTreeMap<u32, F::Game> = prior
        .specs()
        .map(|t| Ok((t.id, family.instantiate(t)?)))
        .collect::<Result<_>>()?;
    for ty in prior.specs() {
        state.attacker_for(ty)?;
    }
    let (types_s, iter_s) = streams(cfg);
    let k = cfg.k_for(prior);
    let mut state = state;
    let mut observer = observer;
    let start = Instant::now();
    let first = state.iteration;
    for t in first..first + cfg.iterations {
        let types = sample_types(prior, k, types_s.index(t as u64))?;
        let outcomes: Vec<TypeOutcome> = types
            .par_iter()
            .enumerate()
            .map(|(j, ty)| {
                let phi = state.attacker_for(ty)?;
                meta_sl_type(
                    cfg,
                    &state.theta,
                    phi,
                    ty,
                    &games[&ty.id],
                    iter_s.index(t as u64).index(j as u64),
                )
            })
            .collect::<Result<_>>()?;
        let candidates: Vec<Vec<f64>> = outcomes.iter().map(|o| o.theta_bar.clone()).collect();
        let theta = outer_update(&state.theta, &candidates);
        check_finite(&theta, t + 1)?;
        let mut stats = BatchStats::default();
        for o in outcomes {
            stats.add(&o.batch);
            if let Some((id, phi)) = o.phi {
                check_finite(&phi, t + 1)?;
                state.phis.insert(id, phi);
            }
        }
        state.theta = theta;
        state.iteration = t + 1;

        let mut report = stats.report(t + 1, types.iter().map(|t| t.id).collect());
        let last = t + 1 == first + cfg.iterations;
        if cfg.residual_every > 0 && (t == first || last || (t + 1) % cfg.residual_every == 0) {
            let res = fose_residual(
                &state.theta,
                &state.phis,
                prior,
                family,
                cfg.eta,
                &cfg.residual,
                SeedStream::root(cfg.seed).derive("diagnostics").index(t as u64),
            )?;
            let rec = DiagnosticRecord {
                iteration: t + 1,
                defender_residual: res.defender,
                defender_residual_se: Some(res.defender_se),
                attacker_residuals: res.per_type.iter().map(|(k, v)| (*k, v.0)).collect(),
                wallclock_s: Some(start.elapsed().as_secs_f64()),
                ..Default::default()
            };
            state.residual_history.push(rec.clone());
            report.residual = Some(rec);
        }
        report.wallclock_s = start.elapsed().as_secs_f64();
        if let Some(obs) = observer.as_deref_mut() {
            obs(&report, &state)?;
        }
    }
    Ok(state)
}

/// The non-adaptive Bayesian Stackelberg baseline: meta-SL with `eta = 0`.
pub fn bse_baseline<F: GameFamily>(
    cfg: &MetaConfig,
    prior: &TypePrior,
    family: &F,
    state: MetaState,
    observer: Option<&mut Observer<'_>>,
) -> Result<MetaState> {
    let cfg = MetaConfig {
        eta: 0.0,
        ..cfg.clone()
    };
    meta_sl(&cfg, prior, family, state, observer)
}

/// One online adaptation step's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptStep {
    /// 1-based step number.
    pub step: usize,
    /// Mean discounted defender return of the batch collected before the step.
    pub defender_return: f64,
    pub r_d_mean: f64,
    pub r_a_mean: f64,
    pub clean_loss: Option<f64>,
    pub clean_acc: Option<f64>,
    pub backdoor_acc: Option<f64>,
}

/// Repeated adaptation against freshly collected trajectories from a live
/// game; step `k` samples from `stream.index(k)`.
#[allow(clippy::too_many_arguments)]
pub fn online_adapt<G: Game>(
    theta: &PolicyParams,
    game: &G,
    attacker: Option<&PolicyParams>,
    steps: usize,
    eta: f64,
    batch_size: usize,
    baseline: Baseline,
    stream: SeedStream,
) -> Result<(PolicyParams, Vec<AdaptStep>)> {
    let sampler = GameSampler::new(game);
    let mut cur = theta.clone();
    let mut log = Vec::with_capacity(steps);
    for k in 0..steps {
        let batch = sampler.sample(&cur, attacker, batch_size, stream.index(k as u64))?;
        let mut stats = BatchStats::default();
        stats.add(&batch);
        let r = stats.report(k + 1, Vec::new());
        log.push(AdaptStep {
            step: k + 1,
            defender_return: r.defender_return,
            r_d_mean: r.r_d_mean,
            r_a_mean: r.r_a_mean,
            clean_loss: r.clean_loss,
            clean_acc: r.clean_acc,
            backdoor_acc: r.backdoor_acc,
        });
        cur = adapt(&cur, &batch, eta, baseline)?;
        check_finite(&cur, k + 1)?;
    }
    Ok((cur, log))
}

/// Mean discounted defender return of `n` fresh rollouts.
pub fn mean_defender_return<G: Game>(
    theta: &PolicyParams,
    game: &G,
    attacker: Option<&PolicyParams>,
    n: usize,
    stream: SeedStream,
) -> Result<f64> {
    let batch = GameSampler::new(game).sample(theta, attacker, n, stream)?;
    Ok(batch
        .iter()
        .map(|t| discounted_return(t, Player::Defender))
        .sum::<f64>()
        / n as f64)
}
