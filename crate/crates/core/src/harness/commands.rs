//! The four subcommands. Each returns a summary on success; the binary maps
//! errors to exit codes with [`super::exit_code`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{CheckId, RunConfig};
use super::metrics::{MetricsRow, MetricsWriter};
use crate::defenses::{build_pipeline, AggregatorId, DefenseAction};
use crate::diagnostics::{
    fose_residual, grad_check_suite, lipschitz_probe, pl_probe, sc_check, DiagnosticRecord, GradCheckReport,
    LipschitzBlock, LipschitzReport, McAttackerObjective, McBlocks, PlReport, ScFit,
};
use crate::env::{FlEnv, FlFamily, RewardSignMode};
use crate::error::{Error, Result};
use crate::game::{
    discounted_return, sample_batch, Actor, AttackCategory, AttackTypeSpec, Game, GameFamily, Player,
    TypePrior,
};
use crate::meta::{
    best_response, bse_baseline, meta_sl, online_adapt, reptile_meta_rl, IterationReport, MetaState,
};
use crate::policy::{Arch, PolicyParams};
use crate::rng::SeedStream;

pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";
pub const RESOLVED_CONFIG: &str = "run_config_resolved.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ADAPTED_CHECKPOINT: &str = "adapted_checkpoint.json";
pub const ADAPT_METRICS_FILE: &str = "adapt_metrics.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// File name of the attacker checkpoint of type `id`.
pub fn attacker_checkpoint_name(id: u32) -> String {
    format!("attacker_{id}.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algo {
    MetaSl,
    MetaRl,
    Bse,
}

impl Algo {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "meta-sl" => Ok(Self::MetaSl),
            "meta-rl" => Ok(Self::MetaRl),
            "bse" => Ok(Self::Bse),
            other => Err(Error::Config(format!(
                "unknown algorithm {other:?}; expected meta-sl, meta-rl or bse"
            ))),
        }
    }
}

/// The defense evaluated by `eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalDefense {
    Policy,
    PlainMean,
}

impl EvalDefense {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Policy => "policy",
            Self::PlainMean => "plain-mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "policy" => Ok(Self::Policy),
            "plain-mean" => Ok(Self::PlainMean),
            other => Err(Error::Config(format!(
                "unknown defense {other:?}; expected policy or plain-mean"
            ))),
        }
    }
}

fn output_dir(cfg: &RunConfig, out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Writes the resolved config next to the outputs and echoes it.
fn echo_config(cfg: &RunConfig, dir: &Path, quiet: bool) -> Result<()> {
    let text = cfg.to_toml()?;
    std::fs::write(dir.join(RESOLVED_CONFIG), &text)?;
    if !quiet {
        println!("# resolved configuration\n{text}");
    }
    Ok(())
}

fn family(cfg: &RunConfig) -> Result<FlFamily> {
    FlFamily::new(cfg.env.clone(), SeedStream::root(cfg.seed).derive("env"))
}

fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    PolicyParams::load(path)
}

fn fresh_attacker(cfg: &RunConfig, game: &FlEnv, id: u32) -> PolicyParams {
    let arch = Arch::mlp(game.attacker_obs_dim(), cfg.meta.hidden, game.attacker_act_dim());
    PolicyParams::init(
        Player::Attacker,
        arch,
        cfg.meta.init_log_std,
        SeedStream::root(cfg.seed)
            .derive("policy-init")
            .derive("attacker")
            .index(id as u64),
    )
}

/// The attacker policy for an adaptive type: `attacker_<id>.json` next to
/// the defender checkpoint when present, otherwise a fresh seeded policy.
fn attacker_for(
    cfg: &RunConfig,
    game: &FlEnv,
    ty: &AttackTypeSpec,
    ckpt_dir: Option<&Path>,
) -> Result<Option<PolicyParams>> {
    if !ty.is_adaptive() {
        return Ok(None);
    }
    if let Some(dir) = ckpt_dir {
        let p = dir.join(attacker_checkpoint_name(ty.id));
        if p.exists() {
            return Ok(Some(PolicyParams::load(&p)?));
        }
    }
    Ok(Some(fresh_attacker(cfg, game, ty.id)))
}

/// `benign`, a type id of the prior, or a path to a JSON type spec.
pub fn resolve_attack(name: &str, prior: &TypePrior) -> Result<Option<AttackTypeSpec>> {
    if name == "benign" {
        return Ok(None);
    }
    if let Ok(id) = name.parse::<u32>() {
        if let Some(t) = prior.get(id) {
            return Ok(Some(t.clone()));
        }
    } else if Path::new(name).is_file() {
        let text = std::fs::read_to_string(name)?;
        let spec: AttackTypeSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("attack spec {name}: {e}")))?;
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        return Ok(Some(spec));
    }
    let known: Vec<String> = prior.specs().map(|t| t.id.to_string()).collect();
    Err(Error::Config(format!(
        "unknown attack {name:?}; known type ids: {} (or \"benign\", or a path to a type-spec JSON file)",
        known.join(", ")
    )))
}

fn game_for(family: &FlFamily, ty: &Option<AttackTypeSpec>) -> Result<FlEnv> {
    match ty {
        Some(t) => family.instantiate(t),
        None => family.benign(),
    }
}

fn row_from_report(r: &IterationReport, wallclock: bool) -> MetricsRow {
    let res = r.residual.as_ref();
    MetricsRow {
        iter: r.iteration,
        round: None,
        clean_loss: r.clean_loss,
        clean_acc: r.clean_acc,
        backdoor_acc: r.backdoor_acc,
        r_d_mean: (!r.sampled_types.is_empty() && r.clean_loss.is_some()).then_some(r.r_d_mean),
        r_a_mean: (!r.sampled_types.is_empty() && r.clean_loss.is_some()).then_some(r.r_a_mean),
        residual_d: res.map(|x| x.defender_residual),
        residual_a_max: res.and_then(DiagnosticRecord::attacker_residual_max),
        wallclock_s: wallclock.then_some(r.wallclock_s),
    }
}

#[derive(Debug, Clone)]
pub struct PretrainArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub algo: Algo,
    pub seed: Option<u64>,
    pub quiet: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub out_dir: PathBuf,
    pub iterations: usize,
    pub final_checkpoint: PathBuf,
    pub residual_history: Vec<DiagnosticRecord>,
}

/// Runs the selected training algorithm and writes `checkpoint_final.json`,
/// one `attacker_<id>.json` per adaptive type, `metrics.csv` and
/// `run_config_resolved.toml` into the output directory.
pub fn cmd_pretrain(args: &PretrainArgs) -> Result<PretrainSummary> {
    let cfg = RunConfig::load(&args.config, args.seed)?;
    let prior = cfg.prior().clone();
    if args.algo == Algo::MetaRl {
        if let Some(t) = prior.specs().find(|t| t.is_adaptive()) {
            return Err(Error::Config(format!(
                "meta-rl handles rule-based attacks only, but type {} is adaptive; use --algo meta-sl",
                t.id
            )));
        }
    }
    let dir = output_dir(&cfg, &args.out)?;
    echo_config(&cfg, &dir, args.quiet)?;
    let family = family(&cfg)?;
    let meta_cfg = cfg.meta_config();
    let state = MetaState::init(&meta_cfg, &prior, &family)?;

    let mut metrics = MetricsWriter::create(&dir.join(METRICS_FILE))?;
    let every = cfg.checkpoint_every;
    let wallclock = cfg.record_wallclock;
    let dir_ref = dir.clone();
    let mut observer = |r: &IterationReport, s: &MetaState| -> Result<()> {
        metrics.write(&row_from_report(r, wallclock))?;
        if every > 0 && r.iteration.is_multiple_of(every) {
            s.theta
                .save(&dir_ref.join(format!("checkpoint_iter_{:05}.json", r.iteration)))?;
        }
        Ok(())
    };
    let final_state = match args.algo {
        Algo::MetaRl => {
            let theta = reptile_meta_rl(&meta_cfg, &prior, &family, &state.theta, Some(&mut observer))?;
            MetaState {
                theta,
                iteration: meta_cfg.iterations,
                ..state
            }
        }
        Algo::MetaSl => meta_sl(&meta_cfg, &prior, &family, state, Some(&mut observer))?,
        Algo::Bse => bse_baseline(&meta_cfg, &prior, &family, state, Some(&mut observer))?,
    };
    let final_checkpoint = dir.join(FINAL_CHECKPOINT);
    final_state.theta.save(&final_checkpoint)?;
    for (id, phi) in &final_state.phis {
        phi.save(&dir.join(attacker_checkpoint_name(*id)))?;
    }
    Ok(PretrainSummary {
        out_dir: dir,
        iterations: final_state.iteration,
        final_checkpoint,
        residual_history: final_state.residual_history,
    })
}

#[derive(Debug, Clone)]
pub struct AdaptArgs {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub attack: String,
    pub steps: usize,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quiet: bool,
}

#[derive(Debug, Clone)]
pub struct AdaptSummary {
    pub adapted_checkpoint: PathBuf,
    pub steps: Vec<crate::meta::AdaptStep>,
}

/// Online adaptation of a pretrained defender against one attack. Writes
/// `adapted_checkpoint.json` and `adapt_metrics.csv`; with zero steps the
/// checkpoint is copied byte for byte.
pub fn cmd_adapt(args: &AdaptArgs) -> Result<AdaptSummary> {
    let cfg = RunConfig::load(&args.config, args.seed)?;
    let theta = load_checkpoint(&args.checkpoint)?;
    let ty = resolve_attack(&args.attack, cfg.prior())?;
    let dir = output_dir(&cfg, &args.out)?;
    echo_config(&cfg, &dir, args.quiet)?;
    let adapted_path = dir.join(ADAPTED_CHECKPOINT);
    let mut metrics = MetricsWriter::create(&dir.join(ADAPT_METRICS_FILE))?;
    if args.steps == 0 {
        std::fs::copy(&args.checkpoint, &adapted_path)?;
        return Ok(AdaptSummary {
            adapted_checkpoint: adapted_path,
            steps: Vec::new(),
        });
    }
    let family = family(&cfg)?;
    let game = game_for(&family, &ty)?;
    let attacker = match &ty {
        Some(t) => attacker_for(&cfg, &game, t, args.checkpoint.parent())?,
        None => None,
    };
    let (adapted, log) = online_adapt(
        &theta,
        &game,
        attacker.as_ref(),
        args.steps,
        cfg.meta.eta,
        cfg.meta.batch_size,
        cfg.meta.baseline,
        SeedStream::root(cfg.seed).derive("adapt"),
    )?;
    for s in &log {
        metrics.write(&MetricsRow {
            iter: s.step,
            clean_loss: s.clean_loss,
            clean_acc: s.clean_acc,
            backdoor_acc: s.backdoor_acc,
            r_d_mean: Some(s.r_d_mean),
            r_a_mean: Some(s.r_a_mean),
            ..Default::default()
        })?;
    }
    adapted.save(&adapted_path)?;
    Ok(AdaptSummary {
        adapted_checkpoint: adapted_path,
        steps: log,
    })
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub config: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub attack: String,
    pub episodes: usize,
    pub defense: EvalDefense,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let se = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, se })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attack: String,
    pub defense: EvalDefense,
    pub episodes: usize,
    pub seed: u64,
    pub defender_return: MeanSe,
    pub clean_acc: MeanSe,
    pub clean_loss: MeanSe,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backdoor_acc: Option<MeanSe>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "attack {}  defense {}  episodes {}\n",
            self.attack,
            self.defense.as_str(),
            self.episodes
        );
        s += &format!(
            "defender return  {:.4} ± {:.4}\n",
            self.defender_return.mean, self.defender_return.se
        );
        s += &format!(
            "clean accuracy   {:.4} ± {:.4}\n",
            self.clean_acc.mean, self.clean_acc.se
        );
        s += &format!(
            "clean loss       {:.4} ± {:.4}\n",
            self.clean_loss.mean, self.clean_loss.se
        );
        if let Some(b) = &self.backdoor_acc {
            s += &format!("backdoor acc     {:.4} ± {:.4}\n", b.mean, b.se);
        }
        s
    }
}

/// Evaluation episodes (episode `i` on `eval/i`); reports mean ± SE of the
/// defender return and final-model metrics and writes `eval.json`.
pub fn evaluate(
    cfg: &RunConfig,
    theta: Option<&PolicyParams>,
    attack: &str,
    episodes: usize,
    defense: EvalDefense,
    ckpt_dir: Option<&Path>,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("eval needs at least one episode".into()));
    }
    let ty = resolve_attack(attack, cfg.prior())?;
    let family = family(cfg)?;
    let game = game_for(&family, &ty)?;
    let stream = SeedStream::root(cfg.seed).derive("eval");
    let (returns, summaries) = match defense {
        EvalDefense::Policy => {
            let theta = theta.ok_or_else(|| Error::Config("policy evaluation needs --checkpoint".into()))?;
            let attacker = match &ty {
                Some(t) => attacker_for(cfg, &game, t, ckpt_dir)?,
                None => None,
            };
            let batch = sample_batch(
                &game,
                Actor::Policy(theta),
                attacker.as_ref().map(Actor::Policy),
                episodes,
                stream,
            )?;
            (
                batch
                    .iter()
                    .map(|t| discounted_return(t, Player::Defender))
                    .collect::<Vec<_>>(),
                batch.iter().map(|t| t.summary).collect::<Vec<_>>(),
            )
        }
        EvalDefense::PlainMean => {
            let pipeline = build_pipeline(DefenseAction::passthrough(), AggregatorId::Mean, cfg.env.krum_f)?;
            let runs = (0..episodes as u64)
                .map(|i| game.run_fixed_pipeline(&pipeline, stream.index(i)))
                .collect::<Result<Vec<_>>>()?;
            runs.into_iter().unzip()
        }
    };
    let acc: Vec<f64> = summaries.iter().filter_map(|s| s.clean_acc).collect();
    let loss: Vec<f64> = summaries.iter().filter_map(|s| s.clean_loss).collect();
    let bd: Vec<f64> = summaries.iter().filter_map(|s| s.backdoor_acc).collect();
    let missing = || Error::validation("episode summaries carry no clean metrics");
    Ok(EvalReport {
        attack: attack.to_string(),
        defense,
        episodes,
        seed: cfg.seed,
        defender_return: MeanSe::of(&returns).ok_or_else(missing)?,
        clean_acc: MeanSe::of(&acc).ok_or_else(missing)?,
        clean_loss: MeanSe::of(&loss).ok_or_else(missing)?,
        backdoor_acc: MeanSe::of(&bd),
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let cfg = RunConfig::load(&args.config, args.seed)?;
    let theta = match &args.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    if args.episodes == 0 {
        return Err(Error::Config("eval needs at least one episode".into()));
    }
    let dir = output_dir(&cfg, &args.out)?;
    echo_config(&cfg, &dir, args.quiet)?;
    let ckpt_dir = args.checkpoint.as_deref().and_then(Path::parent);
    let report = evaluate(
        &cfg,
        theta.as_ref(),
        &args.attack,
        args.episodes,
        args.defense,
        ckpt_dir,
    )?;
    std::fs::write(dir.join(EVAL_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct DiagnoseArgs {
    pub config: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub check: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScEntry {
    pub type_id: u32,
    pub fit: ScFit,
    /// Whether the configuration promises an exact zero-sum relation
    /// (untargeted type, consistent sign mode).
    pub asserted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub record: DiagnosticRecord,
    #[serde(default)]
    pub sc: Vec<ScEntry>,
    #[serde(default)]
    pub pl: BTreeMap<u32, PlReport>,
    #[serde(default)]
    pub lipschitz: Vec<LipschitzReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradCheckReport>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Failed hard assertions (gradient checks, asserted strict competitiveness).
    #[serde(default)]
    pub failures: Vec<String>,
}

impl DiagnosticsReport {
    pub fn to_table(&self) -> String {
        let mut s = self.record.to_table();
        for e in &self.sc {
            s += &format!(
                "sc[type {}]  c = {:.6}  d = {:.3e}  max|res| = {:.3e}\n",
                e.type_id, e.fit.c, e.fit.d, e.fit.max_abs_residual
            );
        }
        for (id, p) in &self.pl {
            s += &format!(
                "pl[type {id}]  ratio = {}  invalidated = {}  {}\n",
                p.ratio.map_or("-".to_string(), |r| format!("{r:.4}")),
                p.invalidated,
                if p.verified() { "verified" } else { "PL unverified" }
            );
        }
        for l in &self.lipschitz {
            s += &format!(
                "lipschitz {:<4} {:.4}  ({} pairs)\n",
                l.block.as_str(),
                l.estimate,
                l.pairs_used
            );
        }
        if let Some(g) = &self.gradcheck {
            s += &g.to_table();
        }
        for w in &self.warnings {
            s += &format!("warning: {w}\n");
        }
        for f in &self.failures {
            s += &format!("FAILED: {f}\n");
        }
        s
    }
}

/// Runs the selected diagnostics at a checkpoint (or at a fresh seeded
/// initialization) and writes `diagnostics.json`.
pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<DiagnosticsReport> {
    let cfg = RunConfig::load(&args.config, args.seed)?;
    let checks: Vec<CheckId> = match &args.check {
        Some(c) => vec![CheckId::parse(c)?],
        None => cfg.diagnostics.checks.clone(),
    };
    let dir = output_dir(&cfg, &args.out)?;
    echo_config(&cfg, &dir, args.quiet)?;
    let report = diagnose(&cfg, args.checkpoint.as_deref(), &checks)?;
    std::fs::write(dir.join(DIAGNOSTICS_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// The diagnostics behind `diagnose`, without file output.
pub fn diagnose(cfg: &RunConfig, checkpoint: Option<&Path>, checks: &[CheckId]) -> Result<DiagnosticsReport> {
    let wants = |c: CheckId| checks.iter().any(|k| k.includes(c));
    let start = Instant::now();
    let prior = cfg.prior().clone();
    let dcfg = &cfg.diagnostics;
    let root = SeedStream::root(cfg.seed).derive("diagnostics");
    let mut report = DiagnosticsReport::default();

    let needs_env =
        wants(CheckId::Fose) || wants(CheckId::Sc) || wants(CheckId::Pl) || wants(CheckId::Lipschitz);
    if needs_env {
        let family = family(cfg)?;
        let meta_cfg = cfg.meta_config();
        let mut state = MetaState::init(&meta_cfg, &prior, &family)?;
        if let Some(p) = checkpoint {
            state.theta = load_checkpoint(p)?;
            let dir = p.parent();
            for ty in prior.specs().filter(|t| t.is_adaptive()) {
                let game = family.instantiate(ty)?;
                if let Some(phi) = attacker_for(cfg, &game, ty, dir)? {
                    state.phis.insert(ty.id, phi);
                }
            }
        }
        if wants(CheckId::Fose) {
            let res = fose_residual(
                &state.theta,
                &state.phis,
                &prior,
                &family,
                cfg.meta.eta,
                &dcfg.residual,
                root.derive("fose"),
            )?;
            report.record.defender_residual = res.defender;
            report.record.defender_residual_se = Some(res.defender_se);
            report.record.attacker_residuals = res.per_type.iter().map(|(k, v)| (*k, v.0)).collect();
        }
        if wants(CheckId::Sc) {
            for ty in prior.specs() {
                let game = family.instantiate(ty)?;
                let fit = sc_check(&game, dcfg.sc_samples, root.derive("sc").index(ty.id as u64))?;
                let asserted = ty.category == AttackCategory::Untargeted
                    && ty.m1 == 0
                    && cfg.env.reward_sign_mode == RewardSignMode::Consistent;
                if asserted && !fit.strictly_competitive(1e-10) {
                    report.failures.push(format!(
                        "type {} should be zero-sum but fit c = {}, max residual {:.3e}",
                        ty.id, fit.c, fit.max_abs_residual
                    ));
                } else if !asserted && fit.c >= 0.0 {
                    report.warnings.push(format!(
                        "type {}: fitted c = {:.4} >= 0, the game is not strictly competitive",
                        ty.id, fit.c
                    ));
                }
                if report.record.sc_fit.is_none() {
                    report.record.sc_fit = Some(fit);
                }
                report.sc.push(ScEntry {
                    type_id: ty.id,
                    fit,
                    asserted,
                });
            }
        }
        if wants(CheckId::Pl) {
            for ty in prior.specs().filter(|t| t.is_adaptive()) {
                let game = family.instantiate(ty)?;
                let phi0 = &state.phis[&ty.id];
                let s = root.derive("pl").index(ty.id as u64);
                let br = best_response(
                    &state.theta,
                    phi0,
                    &crate::game::GameSampler::new(&game),
                    dcfg.pl_best_response_steps,
                    cfg.meta.kappa_a,
                    dcfg.probe_batch,
                    cfg.meta.baseline,
                    s.derive("best-response"),
                )?;
                let obj = McAttackerObjective {
                    game: &game,
                    defender: state.theta.clone(),
                    attacker: br.phi.clone(),
                    batch_size: dcfg.probe_batch,
                    baseline: cfg.meta.baseline,
                };
                let pl = pl_probe(
                    &obj,
                    &br.phi.flat,
                    dcfg.pl_radius,
                    dcfg.pl_probes,
                    s.derive("probe"),
                )?;
                if !pl.verified() {
                    report.warnings.push(format!("type {}: PL unverified", ty.id));
                }
                if report.record.pl_ratio.is_none() {
                    report.record.pl_ratio = pl.ratio;
                }
                report.pl.insert(ty.id, pl);
            }
        }
        if wants(CheckId::Lipschitz) {
            let ty = prior
                .specs()
                .find(|t| t.is_adaptive())
                .or_else(|| prior.specs().next())
                .ok_or(Error::Empty("type prior"))?;
            let game = family.instantiate(ty)?;
            let attacker = state.phis.get(&ty.id).cloned();
            let blocks = McBlocks {
                game: &game,
                defender: state.theta.clone(),
                attacker: attacker.clone(),
                batch_size: dcfg.probe_batch,
                baseline: cfg.meta.baseline,
                eta: cfg.meta.eta,
            };
            let phi_flat = attacker.map(|p| p.flat).unwrap_or_default();
            for block in LipschitzBlock::ALL {
                if phi_flat.is_empty() && !matches!(block, LipschitzBlock::L11 | LipschitzBlock::LV) {
                    continue;
                }
                report.lipschitz.push(lipschitz_probe(
                    &blocks,
                    block,
                    &state.theta.flat,
                    &phi_flat,
                    dcfg.lipschitz_pairs,
                    dcfg.lipschitz_radius,
                    root.derive("lipschitz").derive(block.as_str()),
                )?);
            }
        }
    }
    if wants(CheckId::Gradcheck) {
        let n = dcfg.gradcheck_samples;
        let g = grad_check_suite(cfg.seed, n, n, n)?;
        report.record.grad_check_rel_err = Some(g.max_rel_err());
        for e in g.entries.iter().filter(|e| !e.passed) {
            report
                .failures
                .push(format!("gradient check {} (max z {:.2})", e.name, e.max_z));
        }
        report.gradcheck = Some(g);
    }
    report.record.wallclock_s = Some(start.elapsed().as_secs_f64());
    Ok(report)
}
