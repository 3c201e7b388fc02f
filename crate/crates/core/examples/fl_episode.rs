//! One federated-learning episode under IPM, once with plain averaging and
//! once with a fixed clipped trimmed-mean pipeline.

use metastack::defenses::{build_pipeline, AggregatorId, DefenseAction};
use metastack::env::{EnvConfig, FlFamily};
use metastack::game::{AttackTypeSpec, Behavior, GameFamily, RuleId};
use metastack::rng::SeedStream;

fn main() -> metastack::Result<()> {
    let family = FlFamily::new(EnvConfig::default(), SeedStream::root(3).derive("env"))?;
    let game = family.instantiate(&AttackTypeSpec::untargeted(0, 4, Behavior::Rule(RuleId::Ipm)))?;
    let benign = family.benign()?;

    let plain = build_pipeline(DefenseAction::passthrough(), AggregatorId::Mean, 2)?;
    let robust = build_pipeline(
        DefenseAction {
            trim_frac: 0.3,
            norm_bound: 1.0,
            noise_std: 0.0,
            post_clip: 5.0,
        },
        AggregatorId::TrimmedMean,
        2,
    )?;

    for (name, env, pipeline) in [
        ("no attack, mean", &benign, &plain),
        ("ipm, mean", &game, &plain),
        ("ipm, clip + tmean", &game, &robust),
    ] {
        let (ret, summary) = env.run_fixed_pipeline(pipeline, SeedStream::root(7))?;
        println!(
            "{name:<18} return {ret:>8.3}  clean acc {:.3}",
            summary.clean_acc.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
