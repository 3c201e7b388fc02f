//! Reptile meta-learning across bandits whose optimal action depends on the
//! hidden type, followed by one-step adaptation to each type.

use metastack::game::{AttackTypeSpec, Behavior, GameFamily, Player, RuleId, TypePrior};
use metastack::meta::{online_adapt, reptile_meta_rl, MetaConfig};
use metastack::policy::{Baseline, PolicyParams};
use metastack::rng::SeedStream;
use metastack::toy::{Bandit, BanditFamily};

fn main() -> metastack::Result<()> {
    let family = BanditFamily {
        targets: vec![(0, 1.5), (1, -0.5)],
    };
    let ty = |id| AttackTypeSpec::untargeted(id, 1, Behavior::Rule(RuleId::Ipm));
    let prior = TypePrior::new(vec![(ty(0), 0.5), (ty(1), 0.5)])?;
    let cfg = MetaConfig {
        iterations: 200,
        adapt_steps: 3,
        batch_size: 16,
        hidden: 8,
        kappa: 0.05,
        eta: 0.05,
        ..Default::default()
    };
    let theta0 = PolicyParams::init(
        Player::Defender,
        Bandit::arch(cfg.hidden),
        cfg.init_log_std,
        SeedStream::root(1),
    );
    let theta = reptile_meta_rl(&cfg, &prior, &family, &theta0, None)?;
    println!("meta-policy mean action {:.3}", theta.mode(&[1.0])[0]);

    for spec in prior.specs() {
        let game = family.instantiate(spec)?;
        let (adapted, _) = online_adapt(
            &theta,
            &game,
            None,
            3,
            cfg.eta,
            16,
            Baseline::MeanReturn,
            SeedStream::root(9),
        )?;
        println!(
            "type {} (target {:+.1}): return {:.3} -> {:.3} after 3 steps, action {:.3}",
            spec.id,
            game.target,
            game.expected_return(&theta),
            game.expected_return(&adapted),
            adapted.mode(&[1.0])[0]
        );
    }
    Ok(())
}
