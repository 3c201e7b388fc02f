//! Structural probes: closed-form answers on the quadratic stand-in and the
//! reward relation of the FL game.

use std::collections::BTreeMap;

use metastack::diagnostics::{lipschitz_probe, pl_probe, sc_check, LipschitzBlock, QuadraticStandIn};
use metastack::env::{EnvConfig, FlFamily, RewardSignMode};
use metastack::game::{AttackTypeSpec, Behavior, GameFamily, RuleId};
use metastack::rng::SeedStream;

fn main() -> metastack::Result<()> {
    let g = QuadraticStandIn {
        a: 2.0,
        b: 0.5,
        mu: 3.0,
        eta: 0.1,
        centers: BTreeMap::from([(0, vec![1.0, -1.0])]),
    };
    let theta = g.stationary_point(0)?;
    let pl = pl_probe(
        &g.attacker_objective(theta.clone()),
        &theta,
        0.5,
        16,
        SeedStream::root(0),
    )?;
    println!("stand-in PL ratio {:?} (curvature {})", pl.ratio, g.mu);
    for block in LipschitzBlock::ALL {
        let r = lipschitz_probe(&g.blocks(0), block, &theta, &theta, 8, 0.2, SeedStream::root(1))?;
        println!("stand-in {:<4} {:.4}", block.as_str(), r.estimate);
    }

    for mode in [RewardSignMode::Consistent, RewardSignMode::Literal] {
        let env = EnvConfig {
            reward_sign_mode: mode,
            horizon: 5,
            ..Default::default()
        };
        let family = FlFamily::new(env, SeedStream::root(2).derive("env"))?;
        let game = family.instantiate(&AttackTypeSpec::untargeted(0, 4, Behavior::Rule(RuleId::Ipm)))?;
        let fit = sc_check(&game, 200, SeedStream::root(3))?;
        println!(
            "FL {mode:?}: r_D = {:.6} r_A + {:.2e}, max residual {:.1e}, strictly competitive: {}",
            fit.c,
            fit.d,
            fit.max_abs_residual,
            fit.strictly_competitive(1e-10)
        );
    }
    Ok(())
}
