//! Meta-Stackelberg learning on the scalar poisoning game against one
//! learning attacker and one fixed rule, with the equilibrium residual
//! printed as training goes.

use metastack::diagnostics::ResidualConfig;
use metastack::game::{AttackTypeSpec, Behavior, RuleId, TypePrior};
use metastack::meta::{meta_sl, IterationReport, MetaConfig, MetaState};
use metastack::toy::PoisoningToyFamily;

fn main() -> metastack::Result<()> {
    let family = PoisoningToyFamily::default();
    let prior = TypePrior::new(vec![
        (AttackTypeSpec::untargeted(0, 1, Behavior::Adaptive), 0.5),
        (AttackTypeSpec::untargeted(1, 1, Behavior::Rule(RuleId::Ipm)), 0.5),
    ])?;
    let cfg = MetaConfig {
        iterations: 200,
        attacker_steps: 5,
        batch_size: 16,
        hidden: 8,
        kappa_d: 0.02,
        kappa_a: 0.02,
        residual_every: 25,
        residual: ResidualConfig {
            batch_size: 32,
            replicates: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let state = MetaState::init(&cfg, &prior, &family)?;
    let mut observer = |r: &IterationReport, _: &MetaState| {
        if let Some(d) = &r.residual {
            println!(
                "iter {:>4}  return {:>8.4}  residual_D {:.4} (se {:.4})  residual_A {:.4}",
                r.iteration,
                r.defender_return,
                d.defender_residual,
                d.defender_residual_se.unwrap_or(f64::NAN),
                d.attacker_residual_max().unwrap_or(f64::NAN)
            );
        }
        Ok(())
    };
    let out = meta_sl(&cfg, &prior, &family, state, Some(&mut observer))?;
    println!("finished after {} iterations", out.iteration);
    Ok(())
}
