//! The federated-learning round loop as a two-player Markov game.
//!
//! Each round the sampled clients train locally, malicious clients replace
//! their updates, and the server aggregates with the defense pipeline chosen
//! by the defender. Client updates follow the convention
//! `w_next = w - Aggr(updates)`, so an honest update is `w - w_local`.

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::{index::sample as sample_indices, SliceRandom};
use serde::{Deserialize, Serialize};

use super::dataset::{eval_backdoor_metrics, eval_loss, Dataset, GlobalModel, PoisonedSet};
use super::idx::load_idx_dataset;
use super::synthetic::{SyntheticSpec, SyntheticTask};
use crate::attacks::{
    apply_attack_action, backdoor_eval_set, backdoor_poison, eb_update, ipm_update, lmp_update, AttackAction,
    AttackBox, LmpConfig, LmpTarget,
};
use crate::defenses::{build_pipeline, AggregatorId, DefenseBox, Pipeline};
use crate::error::{Error, Result};
use crate::game::{AttackTypeSpec, Behavior, EpisodeSummary, Game, GameFamily, RuleId, Transition};
use crate::linalg::{cosine, norm, scale};
use crate::rng::{digest_f64, SeedStream, StreamRng};

/// How the attacker's reward combines the main-task and backdoor losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSignMode {
    /// `r_A = -rho * F' + (1 - rho) * F`: the attacker gains from a high
    /// main-task loss and a low backdoor-objective loss.
    #[default]
    Consistent,
    /// `r_A = rho * F' - (1 - rho) * F`.
    Literal,
}

/// Which data the defender's reward loss is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSplit {
    /// A held-out evaluation split never seen by clients.
    #[default]
    HeldOut,
    /// The union of all client training shards.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// IDX image/label pair, pooled to `dim` features.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        dim: usize,
        classes: usize,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub n_clients: usize,
    pub subsample_count: usize,
    pub local_lr: f64,
    /// Local epochs over the client shard.
    pub local_steps: usize,
    pub local_batch: usize,
    pub horizon: usize,
    pub discount: f64,
    pub dataset: DatasetSource,
    /// Server-held samples (FLTrust root data, defender observation loss).
    pub root_size: usize,
    pub test_size: usize,
    pub aggregator: AggregatorId,
    pub krum_f: usize,
    pub defense_box: DefenseBox,
    pub attack_box: AttackBox,
    pub reward_sign_mode: RewardSignMode,
    pub reward_split: RewardSplit,
    pub ipm_eps: f64,
    pub eb_boost: f64,
    pub lmp: LmpConfig,
    /// Fraction of a backdoor client's shard that is poisoned.
    pub poison_fraction: f64,
    /// Whether attackers see the sampled benign clients' updates; otherwise
    /// they use their own honest updates as the reference.
    pub attacker_sees_benign: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_clients: 20,
            subsample_count: 10,
            local_lr: 0.05,
            local_steps: 1,
            local_batch: 10,
            horizon: 25,
            discount: 0.99,
            dataset: DatasetSource::default(),
            root_size: 100,
            test_size: 300,
            aggregator: AggregatorId::TrimmedMean,
            krum_f: 2,
            defense_box: DefenseBox::default(),
            attack_box: AttackBox::default(),
            reward_sign_mode: RewardSignMode::Consistent,
            reward_split: RewardSplit::HeldOut,
            ipm_eps: 10.0,
            eb_boost: 5.0,
            lmp: LmpConfig::default(),
            poison_fraction: 0.5,
            attacker_sees_benign: true,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.subsample_count == 0 {
            return Err(Error::validation("n_clients and subsample_count must be >= 1"));
        }
        if self.subsample_count > self.n_clients {
            return Err(Error::validation(format!(
                "subsample_count {} exceeds n_clients {}",
                self.subsample_count, self.n_clients
            )));
        }
        if self.horizon == 0 {
            return Err(Error::validation("horizon must be >= 1"));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::validation(format!(
                "discount {} outside (0, 1)",
                self.discount
            )));
        }
        if !(self.local_lr >= 0.0 && self.local_lr.is_finite()) || self.local_batch == 0 {
            return Err(Error::validation("local_lr must be >= 0 and local_batch >= 1"));
        }
        if self.root_size == 0 || self.test_size == 0 {
            return Err(Error::validation("root_size and test_size must be >= 1"));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "poison_fraction {} outside (0, 1]",
                self.poison_fraction
            )));
        }
        Ok(())
    }

    /// Feature dimension and class count of the configured data.
    pub fn data_shape(&self) -> (usize, usize) {
        match &self.dataset {
            DatasetSource::Synthetic(s) => (s.dim, s.classes),
            DatasetSource::Idx { dim, classes, .. } => (*dim, *classes),
        }
    }
}

/// Client shards plus the server's root split and the held-out test split.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub clients: Vec<Dataset>,
    pub root: Dataset,
    pub test: Dataset,
    pub train: Dataset,
    /// Features of triggered samples are clamped to `[-bound, bound]`.
    pub feature_bound: f64,
}

fn rms_bound(data: &Dataset) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in data.features() {
        for v in x {
            s += v * v;
            n += 1;
        }
    }
    3.0 * (s / n.max(1) as f64).sqrt()
}

impl FederatedData {
    pub fn build(cfg: &EnvConfig, stream: SeedStream) -> Result<Self> {
        cfg.validate()?;
        let (clients, root, test) = match &cfg.dataset {
            DatasetSource::Synthetic(spec) => {
                let task = SyntheticTask::new(spec.clone(), stream)?;
                (
                    task.client_shards(cfg.n_clients, stream.derive("clients"))?,
                    task.balanced(cfg.root_size, stream.derive("root"))?,
                    task.balanced(cfg.test_size, stream.derive("test"))?,
                )
            }
            DatasetSource::Idx {
                images,
                labels,
                dim,
                classes,
            } => {
                let all = load_idx_dataset(images, labels, *dim, *classes)?;
                split_loaded(all, cfg, stream)?
            }
        };
        let train = Dataset::concat(&clients)?;
        if train.is_empty() {
            return Err(Error::Empty("client training data"));
        }
        let feature_bound = rms_bound(&train);
        Ok(Self {
            clients,
            root,
            test,
            train,
            feature_bound,
        })
    }
}

fn split_loaded(
    all: Dataset,
    cfg: &EnvConfig,
    stream: SeedStream,
) -> Result<(Vec<Dataset>, Dataset, Dataset)> {
    let n = all.len();
    if n < cfg.root_size + cfg.test_size + cfg.n_clients {
        return Err(Error::validation(format!(
            "{n} samples cannot fill root ({}), test ({}) and {} clients",
            cfg.root_size, cfg.test_size, cfg.n_clients
        )));
    }
    let (dim, classes) = (all.dim(), all.classes());
    let (x, y) = all.into_parts();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.derive("split").rng());
    let take = |idx: &[usize]| -> Result<Dataset> {
        Dataset::new_allow_empty(
            dim,
            classes,
            idx.iter().map(|&i| x[i].clone()).collect(),
            idx.iter().map(|&i| y[i]).collect(),
        )
    };
    let test = take(&order[..cfg.test_size])?;
    let root = take(&order[cfg.test_size..cfg.test_size + cfg.root_size])?;
    let rest = &order[cfg.test_size + cfg.root_size..];
    let clients = (0..cfg.n_clients)
        .map(|k| {
            let idx: Vec<usize> = rest.iter().skip(k).step_by(cfg.n_clients).copied().collect();
            take(&idx)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clients, root, test))
}

/// Summary of the updates the server received in the last round.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub mean_cos: f64,
    pub min_cos: f64,
    pub max_cos: f64,
    pub mean_norm: f64,
    pub max_norm: f64,
}

impl UpdateStats {
    pub fn of(updates: &[Vec<f64>]) -> Self {
        let norms: Vec<f64> = updates.iter().map(|u| norm(u)).collect();
        let mut cos = Vec::new();
        for i in 0..updates.len() {
            for j in i + 1..updates.len() {
                cos.push(cosine(&updates[i], &updates[j]));
            }
        }
        let (mean_cos, min_cos, max_cos) = if cos.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            (
                cos.iter().sum::<f64>() / cos.len() as f64,
                cos.iter().cloned().fold(f64::INFINITY, f64::min),
                cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        let (mean_norm, max_norm) = if norms.is_empty() {
            (0.0, 0.0)
        } else {
            (
                norms.iter().sum::<f64>() / norms.len() as f64,
                norms.iter().cloned().fold(0.0, f64::max),
            )
        };
        Self {
            mean_cos,
            min_cos,
            max_cos,
            mean_norm,
            max_norm,
        }
    }
}

/// Game state: the global model, the clients sampled for the coming round
/// and which of them are malicious.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub model: GlobalModel,
    pub subset: Vec<usize>,
    pub identity: Vec<bool>,
    pub round: usize,
    pub last_updates: UpdateStats,
    /// Loss of the current model on the server's root split.
    pub root_loss: f64,
}

impl EnvState {
    pub fn malicious_count(&self) -> usize {
        self.identity.iter().filter(|&&b| b).count()
    }
}

/// Rewards of one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rewards {
    pub r_d: f64,
    pub r_a: f64,
}

/// Defender and attacker rewards from the post-round model losses.
///
/// `f` is the main-task loss and `f_backdoor` the loss on triggered samples
/// relabelled to the target (ignored when `rho = 0`).
pub fn rewards(
    f: f64,
    f_backdoor: Option<f64>,
    ty: &AttackTypeSpec,
    mode: RewardSignMode,
) -> Result<Rewards> {
    let rho = ty.rho()?;
    let f_prime = if rho > 0.0 {
        let fb = f_backdoor.ok_or_else(|| {
            Error::validation(format!("type {} needs a backdoor loss for its reward", ty.id))
        })?;
        ty.lambda_mix * f + (1.0 - ty.lambda_mix) * fb
    } else {
        0.0
    };
    let r_a = match mode {
        RewardSignMode::Consistent => -rho * f_prime + (1.0 - rho) * f,
        RewardSignMode::Literal => rho * f_prime - (1.0 - rho) * f,
    };
    Ok(Rewards { r_d: -f, r_a })
}

pub const DEFENDER_OBS_DIM: usize = 8;
pub const ATTACKER_OBS_DIM: usize = DEFENDER_OBS_DIM + 2;

/// The federated-learning game under one attacker type (or none).
#[derive(Debug, Clone)]
pub struct FlEnv {
    cfg: Arc<EnvConfig>,
    data: Arc<FederatedData>,
    ty: Option<AttackTypeSpec>,
    poisoned_shards: Vec<Option<Dataset>>,
    backdoor_test: Option<PoisonedSet>,
}

impl FlEnv {
    pub fn new(
        cfg: Arc<EnvConfig>,
        data: Arc<FederatedData>,
        ty: Option<AttackTypeSpec>,
        stream: SeedStream,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut poisoned_shards = vec![None; cfg.n_clients];
        let mut backdoor_test = None;
        if let Some(t) = &ty {
            t.validate()?;
            if t.n_malicious() > cfg.n_clients {
                return Err(Error::validation(format!(
                    "type {} has {} malicious clients but only {} clients exist",
                    t.id,
                    t.n_malicious(),
                    cfg.n_clients
                )));
            }
            if t.behavior == Behavior::Rule(RuleId::BflStatic) && t.m2 > 0 {
                return Err(Error::validation(format!(
                    "type {}: bfl_static is a backdoor rule and needs m2 = 0",
                    t.id
                )));
            }
            if t.behavior == Behavior::Rule(RuleId::Lmp) {
                LmpTarget::from_aggregator(cfg.aggregator, 0.0, cfg.krum_f)?;
            }
            if t.m1 > 0 {
                let trigger = t.trigger.as_ref().ok_or_else(|| {
                    Error::validation(format!("type {} has backdoor clients but no trigger", t.id))
                })?;
                let target = t.target_label.unwrap_or(0);
                for (k, shard) in poisoned_shards.iter_mut().enumerate().take(t.m1) {
                    let data_k = &data.clients[k];
                    if !data_k.is_empty() {
                        *shard = Some(backdoor_poison(
                            data_k,
                            trigger,
                            target,
                            cfg.poison_fraction,
                            data.feature_bound,
                            stream.derive("poison").index(k as u64),
                        )?);
                    }
                }
                backdoor_test = Some(backdoor_eval_set(&data.test, t, data.feature_bound)?);
            }
        }
        Ok(Self {
            cfg,
            data,
            ty,
            poisoned_shards,
            backdoor_test,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn data(&self) -> &FederatedData {
        &self.data
    }

    pub fn attack_type(&self) -> Option<&AttackTypeSpec> {
        self.ty.as_ref()
    }

    pub fn backdoor_test(&self) -> Option<&PoisonedSet> {
        self.backdoor_test.as_ref()
    }

    fn n_malicious(&self) -> usize {
        self.ty.as_ref().map_or(0, |t| t.n_malicious())
    }

    fn sample_subset(&self, rng: &mut StreamRng) -> (Vec<usize>, Vec<bool>) {
        let mut subset = sample_indices(rng, self.cfg.n_clients, self.cfg.subsample_count).into_vec();
        subset.sort_unstable();
        let m = self.n_malicious();
        let identity = subset.iter().map(|&k| k < m).collect();
        (subset, identity)
    }

    /// A state with the given model at round 0.
    pub fn state_with_model(&self, model: GlobalModel, rng: &mut StreamRng) -> Result<EnvState> {
        model.validate()?;
        let (subset, identity) = self.sample_subset(rng);
        let root_loss = eval_loss(&model, &self.data.root)?;
        Ok(EnvState {
            model,
            subset,
            identity,
            round: 0,
            last_updates: UpdateStats::default(),
            root_loss,
        })
    }

    /// `w - w_local` after local minibatch SGD on `shard`.
    pub fn local_update(
        &self,
        model: &GlobalModel,
        shard: &Dataset,
        rng: &mut StreamRng,
    ) -> Result<Vec<f64>> {
        if shard.is_empty() {
            return Ok(vec![0.0; model.params.len()]);
        }
        let mut w = model.clone();
        let mut order: Vec<usize> = (0..shard.len()).collect();
        for _ in 0..self.cfg.local_steps {
            order.shuffle(rng);
            for batch in order.chunks(self.cfg.local_batch) {
                let (_, g) = w.loss_and_grad(shard, batch)?;
                crate::linalg::axpy(-self.cfg.local_lr, &g, &mut w.params);
            }
        }
        Ok(crate::linalg::sub(&model.params, &w.params))
    }

    /// Clean test loss/accuracy and, for backdoor types, backdoor accuracy.
    pub fn evaluate(&self, model: &GlobalModel) -> Result<EpisodeSummary> {
        let backdoor_acc = match &self.backdoor_test {
            Some(p) => Some(eval_backdoor_metrics(model, p)?.accuracy),
            None => None,
        };
        Ok(EpisodeSummary {
            clean_loss: Some(eval_loss(model, &self.data.test)?),
            clean_acc: Some(model.accuracy(&self.data.test)?),
            backdoor_acc,
        })
    }

    fn reward_data(&self) -> &Dataset {
        match self.cfg.reward_split {
            RewardSplit::HeldOut => &self.data.test,
            RewardSplit::Train => &self.data.train,
        }
    }

    /// Rewards for a post-round model.
    pub fn rewards_for(&self, model: &GlobalModel, malicious_present: bool) -> Result<Rewards> {
        let f = eval_loss(model, self.reward_data())?;
        let ty = match (&self.ty, malicious_present) {
            (Some(t), true) => t,
            _ => return Ok(Rewards { r_d: -f, r_a: 0.0 }),
        };
        let fb = match &self.backdoor_test {
            Some(p) => Some(eval_backdoor_metrics(model, p)?.loss),
            None => None,
        };
        rewards(f, fb, ty, self.cfg.reward_sign_mode)
    }

    fn malicious_updates(
        &self,
        state: &EnvState,
        honest: &[Vec<f64>],
        pipeline: &Pipeline,
        a_a: Option<&[f64]>,
        rng: &mut StreamRng,
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let ty = match &self.ty {
            Some(t) => t,
            None => return Ok(vec![None; state.subset.len()]),
        };
        let action: Option<AttackAction> = match (&ty.behavior, a_a) {
            (Behavior::Adaptive, Some(raw)) => Some(self.cfg.attack_box.squash(raw)?),
            (Behavior::Adaptive, None) => {
                return Err(Error::validation(format!(
                    "adaptive type {} needs an attacker action",
                    ty.id
                )))
            }
            _ => None,
        };
        let bad: Vec<usize> = (0..state.subset.len()).filter(|&i| state.identity[i]).collect();
        if bad.is_empty() {
            return Ok(vec![None; state.subset.len()]);
        }
        let benign: Vec<Vec<f64>> = (0..state.subset.len())
            .filter(|&i| !state.identity[i])
            .map(|i| honest[i].clone())
            .collect();
        let reference: Vec<Vec<f64>> = if self.cfg.attacker_sees_benign && !benign.is_empty() {
            benign
        } else {
            bad.iter().map(|&i| honest[i].clone()).collect()
        };
        let ref_mean = crate::defenses::aggregate_mean(&reference)?;
        let (bd, ut): (Vec<usize>, Vec<usize>) = bad.iter().partition(|&&i| state.subset[i] < ty.m1);

        let mut out = vec![None; state.subset.len()];
        if !bd.is_empty() {
            let mut own = Vec::with_capacity(bd.len());
            for &i in &bd {
                let k = state.subset[i];
                own.push(match &self.poisoned_shards[k] {
                    Some(shard) => self.local_update(&state.model, shard, rng)?,
                    None => honest[i].clone(),
                });
            }
            let own = crate::defenses::aggregate_mean(&own)?;
            let u = match (&ty.behavior, &action) {
                (Behavior::Adaptive, Some(a)) => apply_attack_action(a, &ref_mean, &own, rng)?,
                (Behavior::Rule(RuleId::Eb), _) => eb_update(&own, self.cfg.eb_boost)?,
                _ => own,
            };
            for &i in &bd {
                out[i] = Some(u.clone());
            }
        }
        if !ut.is_empty() {
            let own_honest: Vec<Vec<f64>> = ut.iter().map(|&i| honest[i].clone()).collect();
            let ascent = scale(-1.0, &crate::defenses::aggregate_mean(&own_honest)?);
            let u = match (&ty.behavior, &action) {
                (Behavior::Adaptive, Some(a)) => apply_attack_action(a, &ref_mean, &ascent, rng)?,
                (Behavior::Rule(RuleId::Ipm), _) => ipm_update(&reference, self.cfg.ipm_eps)?,
                (Behavior::Rule(RuleId::Lmp), _) => {
                    let target = LmpTarget::from_aggregator(
                        pipeline.aggregator,
                        pipeline.action.trim_frac,
                        pipeline.krum_f,
                    )?;
                    lmp_update(&reference, target, ut.len() + bd.len(), &self.cfg.lmp)?.update
                }
                (Behavior::Rule(RuleId::Eb), _) => eb_update(&ascent, self.cfg.eb_boost)?,
                (b, _) => {
                    return Err(Error::Unsupported(format!(
                        "behavior {b:?} for untargeted clients"
                    )))
                }
            };
            for &i in &ut {
                out[i] = Some(u.clone());
            }
        }
        Ok(out)
    }

    /// Updates submitted by the sampled clients, in subset order.
    pub fn round_updates(
        &self,
        state: &EnvState,
        pipeline: &Pipeline,
        a_a: Option<&[f64]>,
        rng: &mut StreamRng,
    ) -> Result<Vec<Vec<f64>>> {
        let honest = state
            .subset
            .iter()
            .map(|&k| self.local_update(&state.model, &self.data.clients[k], rng))
            .collect::<Result<Vec<_>>>()?;
        let malicious = self.malicious_updates(state, &honest, pipeline, a_a, rng)?;
        let updates: Vec<Vec<f64>> = honest
            .into_iter()
            .zip(malicious)
            .map(|(h, m)| m.unwrap_or(h))
            .collect();
        let dim = state.model.params.len();
        for (u, &k) in updates.iter().zip(&state.subset) {
            if u.len() != dim {
                return Err(Error::Dimension {
                    context: "client update",
                    expected: dim,
                    actual: u.len(),
                });
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("update from client {k}")));
            }
        }
        Ok(updates)
    }

    /// Server step: aggregate, apply to the model, post-process.
    pub fn server_step(
        &self,
        model: &GlobalModel,
        updates: &[Vec<f64>],
        pipeline: &Pipeline,
        rng: &mut StreamRng,
    ) -> Result<GlobalModel> {
        let server_update = match pipeline.aggregator {
            AggregatorId::FlTrust => Some(self.local_update(model, &self.data.root, rng)?),
            _ => None,
        };
        let agg = pipeline.aggregate(updates, server_update.as_deref(), rng)?;
        let stepped = crate::linalg::sub(&model.params, &agg);
        let post = pipeline.post_process(&stepped)?;
        let next = GlobalModel::new(model.dim, model.classes, post)?;
        Ok(next)
    }

    pub fn pipeline_for(&self, a_d: &[f64]) -> Result<Pipeline> {
        let action = self.cfg.defense_box.squash(a_d)?;
        build_pipeline(action, self.cfg.aggregator, self.cfg.krum_f)
    }
}

impl Game for FlEnv {
    type State = EnvState;

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn discount(&self) -> f64 {
        self.cfg.discount
    }

    fn type_id(&self) -> u32 {
        self.ty.as_ref().map_or(0, |t| t.id)
    }

    fn defender_obs_dim(&self) -> usize {
        DEFENDER_OBS_DIM
    }

    fn defender_act_dim(&self) -> usize {
        crate::defenses::DefenseAction::DIM
    }

    fn attacker_obs_dim(&self) -> usize {
        ATTACKER_OBS_DIM
    }

    fn attacker_act_dim(&self) -> usize {
        match &self.ty {
            Some(t) if t.is_adaptive() => AttackAction::DIM,
            _ => 0,
        }
    }

    fn reset(&self, rng: &mut StreamRng) -> Result<EnvState> {
        let (d, c) = (self.data.train.dim(), self.data.train.classes());
        self.state_with_model(GlobalModel::zeros(d, c), rng)
    }

    /// `[||w||, root loss, mean/min/max pairwise cosine of last updates,
    /// ln(1 + mean/max update norm), t/H]`.
    fn observe_defender(&self, s: &EnvState) -> Vec<f64> {
        let u = &s.last_updates;
        vec![
            norm(&s.model.params),
            s.root_loss,
            u.mean_cos,
            u.min_cos,
            u.max_cos,
            u.mean_norm.ln_1p(),
            u.max_norm.ln_1p(),
            s.round as f64 / self.cfg.horizon as f64,
        ]
    }

    fn observe_attacker(&self, s: &EnvState) -> Vec<f64> {
        let mut o = self.observe_defender(s);
        o.push(s.malicious_count() as f64);
        o.push(s.round as f64 / self.cfg.horizon as f64);
        o
    }

    fn step(
        &self,
        state: &EnvState,
        a_d: &[f64],
        a_a: Option<&[f64]>,
        rng: &mut StreamRng,
    ) -> Result<Transition<EnvState>> {
        if state.round >= self.cfg.horizon {
            return Err(Error::validation(format!(
                "round {} is past the horizon {}",
                state.round, self.cfg.horizon
            )));
        }
        let pipeline = self.pipeline_for(a_d)?;
        self.step_with_pipeline(state, &pipeline, a_a, rng)
    }

    fn state_digest(&self, s: &EnvState) -> u64 {
        let mut v = s.model.params.clone();
        v.extend(s.identity.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        v.push(s.round as f64);
        digest_f64(&v)
    }

    fn summarize(&self, s: &EnvState) -> EpisodeSummary {
        self.evaluate(&s.model).unwrap_or_default()
    }
}

impl FlEnv {
    /// One round under an explicit defense pipeline instead of a policy action.
    pub fn step_with_pipeline(
        &self,
        state: &EnvState,
        pipeline: &Pipeline,
        a_a: Option<&[f64]>,
        rng: &mut StreamRng,
    ) -> Result<Transition<EnvState>> {
        if state.round >= self.cfg.horizon {
            return Err(Error::validation(format!(
                "round {} is past the horizon {}",
                state.round, self.cfg.horizon
            )));
        }
        let updates = self.round_updates(state, pipeline, a_a, rng)?;
        let model = self.server_step(&state.model, &updates, pipeline, rng)?;
        let malicious_present = state.identity.iter().any(|&b| b);
        let r = self.rewards_for(&model, malicious_present)?;
        let (subset, identity) = self.sample_subset(rng);
        let root_loss = eval_loss(&model, &self.data.root)?;
        Ok(Transition {
            next: EnvState {
                model,
                subset,
                identity,
                round: state.round + 1,
                last_updates: UpdateStats::of(&updates),
                root_loss,
            },
            r_d: r.r_d,
            r_a: r.r_a,
            malicious_present,
        })
    }

    /// A full episode with the same pipeline every round; rule attacks only.
    /// Returns the summed discounted defender return and the final summary.
    pub fn run_fixed_pipeline(
        &self,
        pipeline: &Pipeline,
        stream: SeedStream,
    ) -> Result<(f64, EpisodeSummary)> {
        if self.ty.as_ref().is_some_and(|t| t.is_adaptive()) {
            return Err(Error::validation("fixed-pipeline episodes need a rule attack"));
        }
        let mut rng = stream.rng();
        let mut state = self.reset(&mut rng)?;
        let mut ret = 0.0;
        let mut w = 1.0;
        for _ in 0..self.cfg.horizon {
            let tr = self.step_with_pipeline(&state, pipeline, None, &mut rng)?;
            w *= self.cfg.discount;
            ret += w * tr.r_d;
            state = tr.next;
        }
        Ok((ret, self.evaluate(&state.model)?))
    }
}

/// Shared data and configuration from which per-type games are built.
#[derive(Debug, Clone)]
pub struct FlFamily {
    pub cfg: Arc<EnvConfig>,
    pub data: Arc<FederatedData>,
    stream: SeedStream,
}

impl FlFamily {
    /// Generates or loads the data from `stream.derive("data")`.
    pub fn new(cfg: EnvConfig, stream: SeedStream) -> Result<Self> {
        let data = FederatedData::build(&cfg, stream.derive("data"))?;
        Ok(Self {
            cfg: Arc::new(cfg),
            data: Arc::new(data),
            stream,
        })
    }

    /// The game with no malicious clients.
    pub fn benign(&self) -> Result<FlEnv> {
        FlEnv::new(
            self.cfg.clone(),
            self.data.clone(),
            None,
            self.stream.derive("env"),
        )
    }
}

impl GameFamily for FlFamily {
    type Game = FlEnv;

    fn instantiate(&self, ty: &AttackTypeSpec) -> Result<FlEnv> {
        FlEnv::new(
            self.cfg.clone(),
            self.data.clone(),
            Some(ty.clone()),
            self.stream.derive("env").index(ty.id as u64),
        )
    }
}
