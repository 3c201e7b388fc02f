//! Training-loop contracts on the toy games.

use std::collections::BTreeMap;

use metastack::game::{
    AttackTypeSpec, Behavior, GameFamily, GameSampler, Player, RuleId, TrajectorySampler, TypePrior,
};
use metastack::meta::{
    best_response, bse_baseline, mean_defender_return, meta_sl, online_adapt, outer_update, reptile_meta_rl,
    IterationReport, MetaConfig, MetaState,
};
use metastack::policy::{adapt_steps, Arch, Baseline, GradientMode, PolicyParams};
use metastack::rng::SeedStream;
use metastack::toy::{Bandit, BanditFamily, PoisoningToy, PoisoningToyFamily};
use metastack::Error;

fn rule(id: u32) -> AttackTypeSpec {
    AttackTypeSpec::untargeted(id, 1, Behavior::Rule(RuleId::Ipm))
}

fn adaptive(id: u32) -> AttackTypeSpec {
    AttackTypeSpec::untargeted(id, 1, Behavior::Adaptive)
}

fn bandit_theta(seed: u64) -> PolicyParams {
    PolicyParams::init(Player::Defender, Bandit::arch(8), -0.5, SeedStream::root(seed))
}

fn cfg(seed: u64) -> MetaConfig {
    MetaConfig {
        iterations: 3,
        batch_size: 8,
        hidden: 8,
        eta: 0.05,
        kappa: 0.05,
        kappa_a: 0.05,
        kappa_d: 0.05,
        seed,
        ..Default::default()
    }
}

#[test]
fn reptile_with_zero_inner_steps_keeps_theta() {
    let family = BanditFamily {
        targets: vec![(0, 1.0), (1, -1.0)],
    };
    let prior = TypePrior::new(vec![(rule(0), 0.5), (rule(1), 0.5)]).unwrap();
    let theta = bandit_theta(1);
    let c = MetaConfig {
        adapt_steps: 0,
        ..cfg(1)
    };
    assert_eq!(reptile_meta_rl(&c, &prior, &family, &theta, None).unwrap(), theta);
}

#[test]
fn reptile_with_one_type_replaces_theta_by_inner_result() {
    let family = BanditFamily {
        targets: vec![(0, 1.0)],
    };
    let prior = TypePrior::single(rule(0)).unwrap();
    let theta = bandit_theta(2);
    let c = MetaConfig {
        iterations: 1,
        adapt_steps: 3,
        ..cfg(2)
    };
    let out = reptile_meta_rl(&c, &prior, &family, &theta, None).unwrap();
    let game = family.instantiate(&rule(0)).unwrap();
    let stream = SeedStream::root(2)
        .derive("iter")
        .index(0)
        .index(0)
        .derive("grad");
    let inner = adapt_steps(
        &theta,
        None,
        &GameSampler::new(&game),
        3,
        c.kappa,
        c.batch_size,
        c.baseline,
        stream,
    )
    .unwrap();
    assert_eq!(out, inner);
}

#[test]
fn reptile_rejects_adaptive_types() {
    let family = BanditFamily {
        targets: vec![(0, 1.0)],
    };
    let prior = TypePrior::single(adaptive(0)).unwrap();
    let err = reptile_meta_rl(&cfg(0), &prior, &family, &bandit_theta(0), None).unwrap_err();
    assert!(
        matches!(err, Error::Validation(ref m) if m.contains("meta-SL")),
        "{err}"
    );
}

#[test]
fn reptile_improves_bandit_return() {
    let bandit = Bandit::new(1.5);
    let family = BanditFamily {
        targets: vec![(0, 1.5)],
    };
    let prior = TypePrior::single(rule(0)).unwrap();
    let theta = bandit_theta(3);
    let c = MetaConfig {
        iterations: 20,
        batch_size: 64,
        kappa: 0.05,
        ..cfg(3)
    };
    let out = reptile_meta_rl(&c, &prior, &family, &theta, None).unwrap();
    let eval =
        |p: &PolicyParams| mean_defender_return(p, &bandit, None, 10_000, SeedStream::root(33)).unwrap();
    assert!(eval(&out) > eval(&theta), "{} <= {}", eval(&out), eval(&theta));
}

#[test]
fn meta_sl_matches_reptile_at_degenerate_point() {
    let family = BanditFamily {
        targets: vec![(0, -0.7)],
    };
    let prior = TypePrior::single(rule(0)).unwrap();
    let c = MetaConfig {
        eta: 0.0,
        adapt_steps: 1,
        iterations: 4,
        ..cfg(4)
    };
    let state = MetaState::init(&c, &prior, &family).unwrap();
    let reptile = reptile_meta_rl(&c, &prior, &family, &state.theta, None).unwrap();
    let sl = meta_sl(&c, &prior, &family, state, None).unwrap();
    assert_eq!(sl.theta.flat, reptile.flat);
}

#[test]
fn zero_step_sizes_freeze_theta_while_attackers_train() {
    let family = PoisoningToyFamily::default();
    let prior = TypePrior::new(vec![(adaptive(0), 0.5), (adaptive(1), 0.5)]).unwrap();
    let c = MetaConfig {
        eta: 0.0,
        kappa_d: 0.0,
        ..cfg(5)
    };
    let state = MetaState::init(&c, &prior, &family).unwrap();
    let theta0 = state.theta.clone();
    let phis0 = state.phis.clone();
    let out = meta_sl(&c, &prior, &family, state, None).unwrap();
    assert_eq!(out.theta, theta0);
    assert!(out.phis.iter().any(|(id, p)| p != &phis0[id]));
    assert_eq!(out.iteration, 3);
}

#[test]
fn sampled_attackers_keep_last_best_response_iterate() {
    let family = PoisoningToyFamily::default();
    let prior = TypePrior::new(vec![(adaptive(0), 0.5), (adaptive(1), 0.5)]).unwrap();
    let c = MetaConfig {
        iterations: 1,
        k_types: Some(1),
        ..cfg(6)
    };
    let state = MetaState::init(&c, &prior, &family).unwrap();
    let mut sampled = Vec::new();
    let mut obs = |r: &IterationReport, _: &MetaState| {
        sampled = r.sampled_types.clone();
        Ok(())
    };
    let out = meta_sl(&c, &prior, &family, state.clone(), Some(&mut obs)).unwrap();
    assert_eq!(sampled.len(), 1);
    let id = sampled[0];
    let ty = prior.get(id).unwrap();
    let game = family.instantiate(ty).unwrap();
    let sampler = GameSampler::new(&game);
    let s = SeedStream::root(6).derive("iter").index(0).index(0);
    let batch = sampler
        .sample(
            &state.theta,
            Some(&state.phis[&id]),
            c.batch_size,
            s.derive("adapt"),
        )
        .unwrap();
    let adapted = metastack::policy::adapt(&state.theta, &batch, c.eta, c.baseline).unwrap();
    let br = best_response(
        &adapted,
        &state.phis[&id],
        &sampler,
        c.attacker_steps,
        c.kappa_a,
        c.batch_size,
        c.baseline,
        s.derive("attacker"),
    )
    .unwrap();
    assert_eq!(out.phis[&id], br.phi);
    for (other, phi) in &state.phis {
        if *other != id {
            assert_eq!(&out.phis[other], phi);
        }
    }
}

#[test]
fn outer_update_is_mean_displacement() {
    let theta = bandit_theta(7);
    let d = theta.dim();
    let cands: Vec<Vec<f64>> = (0..3)
        .map(|k| {
            theta
                .flat
                .iter()
                .enumerate()
                .map(|(i, t)| t + 0.1 * (k as f64 + 1.0) * (i as f64).sin())
                .collect()
        })
        .collect();
    let next = outer_update(&theta, &cands);
    for i in 0..d {
        let want: f64 = cands.iter().map(|c| c[i] - theta.flat[i]).sum::<f64>() / 3.0;
        assert!((next.flat[i] - theta.flat[i] - want).abs() < 1e-15);
    }
    assert_eq!(outer_update(&theta, &cands[..1]).flat, cands[0]);
}

#[test]
fn meta_sl_is_reproducible() {
    let family = PoisoningToyFamily::default();
    let prior = TypePrior::new(vec![(adaptive(0), 0.5), (rule(1), 0.5)]).unwrap();
    let c = MetaConfig {
        mode: GradientMode::Full,
        ..cfg(8)
    };
    let run = || {
        let s = MetaState::init(&c, &prior, &family).unwrap();
        meta_sl(&c, &prior, &family, s, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.phis.contains_key(&0) && !a.phis.contains_key(&1));
}

#[test]
fn bse_is_meta_sl_without_adaptation() {
    let family = PoisoningToyFamily::default();
    let prior = TypePrior::new(vec![(adaptive(0), 0.5), (adaptive(1), 0.5)]).unwrap();
    let c = cfg(9);
    let s = MetaState::init(&c, &prior, &family).unwrap();
    let bse = bse_baseline(&c, &prior, &family, s.clone(), None).unwrap();
    let sl = meta_sl(&MetaConfig { eta: 0.0, ..c }, &prior, &family, s, None).unwrap();
    assert_eq!(bse, sl);
}

#[test]
fn best_response_with_zero_steps_is_identity() {
    let game = PoisoningToy::default();
    let d = PolicyParams::init(Player::Defender, Arch::mlp(2, 8, 1), -0.5, SeedStream::root(1));
    let a = PolicyParams::init(Player::Attacker, Arch::mlp(2, 8, 1), -0.5, SeedStream::root(2));
    let br = best_response(
        &d,
        &a,
        &GameSampler::new(&game),
        0,
        0.1,
        8,
        Baseline::MeanReturn,
        SeedStream::root(3),
    )
    .unwrap();
    assert_eq!(br.phi, a);
    assert!(br.returns.is_empty());
}

fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    v.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn best_response_climbs_and_stabilizes() {
    let game = PoisoningToy::default();
    let d = PolicyParams::new(
        Player::Defender,
        Arch::mlp(2, 4, 1),
        vec![0.0; Arch::mlp(2, 4, 1).param_len()],
    )
    .unwrap();
    let sampler = GameSampler::new(&game);
    let mut shrank = Vec::new();
    let mut climbs = 0;
    for seed in 0..10u64 {
        let a = PolicyParams::init(
            Player::Attacker,
            Arch::mlp(2, 8, 1),
            -0.5,
            SeedStream::root(100 + seed),
        );
        let br = best_response(
            &d,
            &a,
            &sampler,
            200,
            0.05,
            32,
            Baseline::MeanReturn,
            SeedStream::root(200 + seed),
        )
        .unwrap();
        let ma = moving_average(&br.returns, 5);
        if ma.last().unwrap() >= ma.first().unwrap() {
            climbs += 1;
        }
        let g_end = metastack::policy::pg_estimate(
            &sampler
                .sample(&d, Some(&br.phi), 256, SeedStream::root(300 + seed))
                .unwrap(),
            &br.phi,
            Baseline::MeanReturn,
        )
        .unwrap()
        .norm();
        let g_start = metastack::policy::pg_estimate(
            &sampler
                .sample(&d, Some(&a), 256, SeedStream::root(300 + seed))
                .unwrap(),
            &a,
            Baseline::MeanReturn,
        )
        .unwrap()
        .norm();
        shrank.push(g_end - g_start);
    }
    assert!(climbs >= 9, "attacker return rose in only {climbs} of 10 seeds");
    shrank.sort_by(f64::total_cmp);
    assert!(shrank[5] < 0.0, "median gradient-norm change {}", shrank[5]);
}

#[test]
fn online_adapt_zero_steps_is_identity() {
    let bandit = Bandit::new(1.0);
    let theta = bandit_theta(10);
    let (out, log) = online_adapt(
        &theta,
        &bandit,
        None,
        0,
        0.1,
        8,
        Baseline::MeanReturn,
        SeedStream::root(1),
    )
    .unwrap();
    assert_eq!(out, theta);
    assert!(log.is_empty());
}

#[test]
fn online_adapt_improves_against_unseen_target() {
    let mut wins = 0;
    for seed in 0..5u64 {
        let family = BanditFamily {
            targets: vec![(0, 1.0), (1, -1.0)],
        };
        let prior = TypePrior::new(vec![(rule(0), 0.5), (rule(1), 0.5)]).unwrap();
        let c = MetaConfig {
            iterations: 30,
            batch_size: 32,
            kappa: 0.05,
            ..cfg(seed)
        };
        let theta = reptile_meta_rl(&c, &prior, &family, &bandit_theta(seed), None).unwrap();
        let held_out = Bandit::new(0.5);
        let (adapted, log) = online_adapt(
            &theta,
            &held_out,
            None,
            10,
            0.05,
            32,
            Baseline::MeanReturn,
            SeedStream::root(50 + seed),
        )
        .unwrap();
        assert_eq!(log.len(), 10);
        if held_out.expected_return(&adapted) >= held_out.expected_return(&theta) {
            wins += 1;
        }
    }
    assert!(wins >= 4, "adaptation helped in {wins} of 5 seeds");
}

#[test]
fn meta_state_has_attackers_for_adaptive_types_only() {
    let family = PoisoningToyFamily::default();
    let prior = TypePrior::new(vec![(adaptive(3), 0.5), (rule(4), 0.5)]).unwrap();
    let s = MetaState::init(&cfg(0), &prior, &family).unwrap();
    assert_eq!(s.phis.keys().copied().collect::<Vec<_>>(), vec![3]);
    let stale = MetaState {
        phis: BTreeMap::new(),
        ..s
    };
    assert!(meta_sl(&cfg(0), &prior, &family, stale, None).is_err());
}
