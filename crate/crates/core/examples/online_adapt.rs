//! Pretrain a defense on a small FL game, then adapt it online against an
//! attack that was not in the training prior.

use metastack::env::{DatasetSource, EnvConfig, FlFamily, SyntheticSpec};
use metastack::game::{AttackTypeSpec, Behavior, GameFamily, RuleId, TypePrior};
use metastack::meta::{mean_defender_return, meta_sl, online_adapt, MetaConfig, MetaState};
use metastack::policy::Baseline;
use metastack::rng::SeedStream;

fn main() -> metastack::Result<()> {
    let env = EnvConfig {
        n_clients: 10,
        subsample_count: 5,
        horizon: 10,
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            dim: 6,
            per_class: 100,
            ..Default::default()
        }),
        ..Default::default()
    };
    let family = FlFamily::new(env, SeedStream::root(5).derive("env"))?;
    let prior = TypePrior::new(vec![
        (AttackTypeSpec::untargeted(0, 2, Behavior::Adaptive), 0.5),
        (AttackTypeSpec::untargeted(1, 2, Behavior::Rule(RuleId::Ipm)), 0.5),
    ])?;
    let cfg = MetaConfig {
        iterations: 40,
        attacker_steps: 3,
        batch_size: 8,
        hidden: 8,
        kappa_d: 0.01,
        kappa_a: 0.01,
        seed: 5,
        ..Default::default()
    };
    let state = meta_sl(
        &cfg,
        &prior,
        &family,
        MetaState::init(&cfg, &prior, &family)?,
        None,
    )?;

    let unseen = family.instantiate(&AttackTypeSpec::untargeted(9, 2, Behavior::Rule(RuleId::Lmp)))?;
    let before = mean_defender_return(&state.theta, &unseen, None, 32, SeedStream::root(6))?;
    let (adapted, log) = online_adapt(
        &state.theta,
        &unseen,
        None,
        5,
        0.01,
        16,
        Baseline::MeanReturn,
        SeedStream::root(7),
    )?;
    for s in &log {
        println!(
            "step {}  return {:.3}  clean acc {:.3}",
            s.step,
            s.defender_return,
            s.clean_acc.unwrap_or(f64::NAN)
        );
    }
    let after = mean_defender_return(&adapted, &unseen, None, 32, SeedStream::root(6))?;
    println!("against LMP: {before:.3} before adaptation, {after:.3} after");
    Ok(())
}
