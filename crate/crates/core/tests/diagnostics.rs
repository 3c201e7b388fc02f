//! Diagnostics against closed-form answers: the quadratic stand-in, exact
//! reward relations of the FL game, and the tabular gradient checks.

use std::collections::BTreeMap;

use metastack::diagnostics::{
    fose_residual, fose_residual_with, grad_check_suite, lipschitz_probe, pl_probe, sc_check, LipschitzBlock,
    Objective, PlStatus, QuadraticStandIn, ResidualConfig,
};
use metastack::env::{EnvConfig, FlFamily, RewardSignMode};
use metastack::game::{AttackTypeSpec, Behavior, Game, GameFamily, Player, RuleId, Transition, TypePrior};
use metastack::policy::{Arch, PolicyParams};
use metastack::rng::{SeedStream, StreamRng};
use metastack::toy::{PoisoningToy, PoisoningToyFamily};
use metastack::Error;

fn adaptive(id: u32) -> AttackTypeSpec {
    AttackTypeSpec::untargeted(id, 1, Behavior::Adaptive)
}

fn params(flat: Vec<f64>, player: Player) -> PolicyParams {
    // a bare linear layout of the right length; the stand-in only reads `flat`
    let n = flat.len();
    let arch = Arch::TabularSoftmax {
        n_states: 1,
        n_actions: n,
    };
    PolicyParams::new(player, arch, flat).unwrap()
}

fn stand_in() -> QuadraticStandIn {
    QuadraticStandIn {
        a: 2.0,
        b: 0.5,
        mu: 2.0,
        eta: 0.1,
        centers: BTreeMap::from([(0, vec![1.0, -0.5, 0.25])]),
    }
}

#[test]
fn stand_in_residual_vanishes_at_its_stationary_point() {
    let g = stand_in();
    let prior = TypePrior::single(adaptive(0)).unwrap();
    let star = g.stationary_point(0).unwrap();
    let theta = params(star.clone(), Player::Defender);
    let phis = BTreeMap::from([(0, params(star, Player::Attacker))]);
    let est = fose_residual_with(&g, &theta, &phis, &prior, 3, SeedStream::root(0)).unwrap();
    assert!(est.defender < 1e-6, "{}", est.defender);
    assert!(est.per_type[&0].0 < 1e-6);
}

#[test]
fn stand_in_residual_matches_the_closed_form_elsewhere() {
    let g = stand_in();
    let prior = TypePrior::single(adaptive(0)).unwrap();
    let t = vec![0.3, 0.7, -1.2];
    let p = vec![-0.4, 0.1, 0.9];
    let theta = params(t.clone(), Player::Defender);
    let phis = BTreeMap::from([(0, params(p.clone(), Player::Attacker))]);
    let est = fose_residual_with(&g, &theta, &phis, &prior, 4, SeedStream::root(1)).unwrap();

    // by hand: theta' = theta + eta (-a (theta - c) + b phi), grad = (1 - eta a)(-a (theta' - c) + b phi)
    let c = [1.0, -0.5, 0.25];
    let (a, b, eta, mu) = (2.0, 0.5, 0.1, 2.0);
    let adapted: Vec<f64> = (0..3)
        .map(|i| t[i] + eta * (-a * (t[i] - c[i]) + b * p[i]))
        .collect();
    let grad: Vec<f64> = (0..3)
        .map(|i| (1.0 - eta * a) * (-a * (adapted[i] - c[i]) + b * p[i]))
        .collect();
    let expected = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let att = (0..3)
        .map(|i| (mu * (p[i] - adapted[i])).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(
        (est.defender - expected).abs() < 1e-12,
        "{} vs {expected}",
        est.defender
    );
    assert!((est.per_type[&0].0 - att).abs() < 1e-12);
    // deterministic oracle: no spread across replicates
    assert_eq!(est.defender_se, 0.0);
}

#[test]
fn rule_types_contribute_only_to_the_defender_residual() {
    let mut g = stand_in();
    g.centers.insert(1, vec![0.0, 0.0, 2.0]);
    let prior = TypePrior::new(vec![
        (adaptive(0), 0.25),
        (
            AttackTypeSpec::untargeted(1, 1, Behavior::Rule(RuleId::Ipm)),
            0.75,
        ),
    ])
    .unwrap();
    let theta = params(vec![0.1, 0.2, 0.3], Player::Defender);
    let phis = BTreeMap::from([(0, params(vec![0.0; 3], Player::Attacker))]);
    let est = fose_residual_with(&g, &theta, &phis, &prior, 2, SeedStream::root(2)).unwrap();
    assert_eq!(est.per_type.keys().copied().collect::<Vec<_>>(), vec![0]);
    let g0 = g.meta_gradient(0, &theta.flat, &phis[&0].flat).unwrap();
    let g1 = g.meta_gradient(1, &theta.flat, &[0.0; 3]).unwrap();
    let mix: Vec<f64> = (0..3).map(|i| 0.25 * g0[i] + 0.75 * g1[i]).collect();
    let expected = mix.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((est.defender - expected).abs() < 1e-12);
}

#[test]
fn missing_attacker_policy_is_an_error() {
    let g = stand_in();
    let prior = TypePrior::single(adaptive(0)).unwrap();
    let theta = params(vec![0.0; 3], Player::Defender);
    let err = fose_residual_with(&g, &theta, &BTreeMap::new(), &prior, 1, SeedStream::root(0)).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
}

/// Adds constants to both players' rewards.
struct Shifted<G> {
    inner: G,
    shift: f64,
}

impl<G: Game> Game for Shifted<G> {
    type State = G::State;
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }
    fn discount(&self) -> f64 {
        self.inner.discount()
    }
    fn type_id(&self) -> u32 {
        self.inner.type_id()
    }
    fn defender_obs_dim(&self) -> usize {
        self.inner.defender_obs_dim()
    }
    fn defender_act_dim(&self) -> usize {
        self.inner.defender_act_dim()
    }
    fn attacker_obs_dim(&self) -> usize {
        self.inner.attacker_obs_dim()
    }
    fn attacker_act_dim(&self) -> usize {
        self.inner.attacker_act_dim()
    }
    fn reset(&self, rng: &mut StreamRng) -> metastack::Result<G::State> {
        self.inner.reset(rng)
    }
    fn observe_defender(&self, s: &G::State) -> Vec<f64> {
        self.inner.observe_defender(s)
    }
    fn observe_attacker(&self, s: &G::State) -> Vec<f64> {
        self.inner.observe_attacker(s)
    }
    fn step(
        &self,
        s: &G::State,
        a_d: &[f64],
        a_a: Option<&[f64]>,
        rng: &mut StreamRng,
    ) -> metastack::Result<Transition<G::State>> {
        let mut tr = self.inner.step(s, a_d, a_a, rng)?;
        tr.r_d += self.shift;
        tr.r_a -= 2.0 * self.shift;
        Ok(tr)
    }
    fn state_digest(&self, s: &G::State) -> u64 {
        self.inner.state_digest(s)
    }
}

struct ShiftedFamily {
    base: PoisoningToyFamily,
    shift: f64,
}

impl GameFamily for ShiftedFamily {
    type Game = Shifted<PoisoningToy>;
    fn instantiate(&self, ty: &AttackTypeSpec) -> metastack::Result<Self::Game> {
        Ok(Shifted {
            inner: self.base.instantiate(ty)?,
            shift: self.shift,
        })
    }
}

#[test]
fn residual_is_invariant_to_constant_reward_shifts() {
    let base = PoisoningToyFamily::default();
    let prior = TypePrior::single(adaptive(0)).unwrap();
    let toy = base.instantiate(&adaptive(0)).unwrap();
    let theta = PolicyParams::init(
        Player::Defender,
        Arch::mlp(toy.defender_obs_dim(), 4, toy.defender_act_dim()),
        -0.5,
        SeedStream::root(3),
    );
    let phi = PolicyParams::init(
        Player::Attacker,
        Arch::mlp(toy.attacker_obs_dim(), 4, toy.attacker_act_dim()),
        -0.5,
        SeedStream::root(4),
    );
    let phis = BTreeMap::from([(0, phi)]);
    let cfg = ResidualConfig {
        batch_size: 64,
        replicates: 16,
        ..Default::default()
    };
    let plain = fose_residual(&theta, &phis, &prior, &base, 0.01, &cfg, SeedStream::root(5)).unwrap();
    let shifted_family = ShiftedFamily { base, shift: -3.0 };
    let shifted = fose_residual(
        &theta,
        &phis,
        &prior,
        &shifted_family,
        0.01,
        &cfg,
        SeedStream::root(6),
    )
    .unwrap();
    let se = (plain.defender_se.powi(2) + shifted.defender_se.powi(2)).sqrt();
    assert!(
        (plain.defender - shifted.defender).abs() <= 3.0 * se,
        "{} vs {} (se {se})",
        plain.defender,
        shifted.defender
    );
}

fn small_env() -> EnvConfig {
    EnvConfig {
        n_clients: 10,
        subsample_count: 5,
        horizon: 4,
        dataset: metastack::env::DatasetSource::Synthetic(metastack::env::SyntheticSpec {
            dim: 4,
            classes: 3,
            per_class: 40,
            ..Default::default()
        }),
        root_size: 30,
        test_size: 60,
        ..Default::default()
    }
}

fn family(env: EnvConfig) -> FlFamily {
    FlFamily::new(env, SeedStream::root(11).derive("env")).unwrap()
}

#[test]
fn untargeted_consistent_game_is_exactly_zero_sum() {
    let f = family(small_env());
    let game = f
        .instantiate(&AttackTypeSpec::untargeted(0, 3, Behavior::Adaptive))
        .unwrap();
    let fit = sc_check(&game, 200, SeedStream::root(0)).unwrap();
    assert!((fit.c + 1.0).abs() < 1e-12, "c = {}", fit.c);
    assert!(fit.d.abs() < 1e-12, "d = {}", fit.d);
    assert!(fit.max_abs_residual <= 1e-10);
    assert!(fit.strictly_competitive(1e-10));
}

#[test]
fn pure_backdoor_with_unit_mix_is_cooperative() {
    let f = family(small_env());
    let ty = AttackTypeSpec::backdoor(0, 3, Behavior::Rule(RuleId::BflStatic), vec![1.0; 4], 0, 1.0);
    let game = f.instantiate(&ty).unwrap();
    let fit = sc_check(&game, 100, SeedStream::root(1)).unwrap();
    assert!((fit.c - 1.0).abs() < 1e-12, "c = {}", fit.c);
    assert!(!fit.strictly_competitive(1e-10));
}

#[test]
fn mixed_backdoor_type_breaks_the_affine_relation() {
    let f = family(small_env());
    let mut ty = AttackTypeSpec::backdoor(0, 2, Behavior::Adaptive, vec![1.0; 4], 0, 0.3);
    ty.m2 = 1;
    ty.category = metastack::game::AttackCategory::Mixed;
    let game = f.instantiate(&ty).unwrap();
    let fit = sc_check(&game, 100, SeedStream::root(2)).unwrap();
    assert!(fit.max_abs_residual > 1e-6, "{fit:?}");
}

#[test]
fn literal_sign_mode_gives_a_cooperative_untargeted_game() {
    let env = EnvConfig {
        reward_sign_mode: RewardSignMode::Literal,
        ..small_env()
    };
    let game = family(env)
        .instantiate(&AttackTypeSpec::untargeted(0, 3, Behavior::Rule(RuleId::Ipm)))
        .unwrap();
    let fit = sc_check(&game, 100, SeedStream::root(3)).unwrap();
    assert!((fit.c - 1.0).abs() < 1e-12);
}

/// Every step pays the same attacker reward.
struct Flat;

impl Game for Flat {
    type State = ();
    fn horizon(&self) -> usize {
        3
    }
    fn discount(&self) -> f64 {
        0.9
    }
    fn defender_obs_dim(&self) -> usize {
        1
    }
    fn defender_act_dim(&self) -> usize {
        1
    }
    fn reset(&self, _rng: &mut StreamRng) -> metastack::Result<()> {
        Ok(())
    }
    fn observe_defender(&self, _s: &()) -> Vec<f64> {
        vec![1.0]
    }
    fn step(
        &self,
        _s: &(),
        a_d: &[f64],
        _a: Option<&[f64]>,
        _rng: &mut StreamRng,
    ) -> metastack::Result<Transition<()>> {
        Ok(Transition {
            next: (),
            r_d: -a_d[0].powi(2),
            r_a: 1.0,
            malicious_present: true,
        })
    }
    fn state_digest(&self, _s: &()) -> u64 {
        0
    }
}

#[test]
fn constant_attacker_reward_cannot_identify_the_slope() {
    let err = sc_check(&Flat, 30, SeedStream::root(0)).unwrap_err();
    assert!(err.to_string().contains("cannot identify c"), "{err}");
    assert!(sc_check(&Flat, 5, SeedStream::root(0)).is_err());
}

#[test]
fn pl_ratio_of_a_quadratic_equals_its_curvature() {
    let g = stand_in();
    let theta = vec![0.5, -0.5, 1.0];
    let obj = g.attacker_objective(theta.clone());
    let rep = pl_probe(&obj, &theta, 0.7, 20, SeedStream::root(0)).unwrap();
    assert!(rep.verified());
    assert!((rep.ratio.unwrap() - g.mu).abs() < 1e-9, "{:?}", rep.ratio);
    assert!(rep.probes.iter().all(|p| p.status == PlStatus::Valid));
}

#[test]
fn pl_probe_with_zero_radius_skips_every_probe() {
    let g = stand_in();
    let theta = vec![0.0; 3];
    let rep = pl_probe(
        &g.attacker_objective(theta.clone()),
        &theta,
        0.0,
        5,
        SeedStream::root(0),
    )
    .unwrap();
    assert!(rep.ratio.is_none());
    assert!(!rep.verified());
    assert!(rep.probes.iter().all(|p| p.status == PlStatus::Skipped));
}

#[test]
fn pl_probe_flags_a_point_that_is_not_the_maximizer() {
    let g = stand_in();
    let theta = vec![0.0; 3];
    let off = vec![2.0, 0.0, 0.0];
    let rep = pl_probe(&g.attacker_objective(theta), &off, 0.5, 16, SeedStream::root(0)).unwrap();
    assert!(rep.invalidated > 0);
    assert!(!rep.verified());
}

struct Scaled<'a>(&'a dyn Objective, f64);

impl Objective for Scaled<'_> {
    fn value(&self, x: &[f64], s: SeedStream) -> metastack::Result<f64> {
        Ok(self.1 * self.0.value(x, s)?)
    }
    fn gradient(&self, x: &[f64], s: SeedStream) -> metastack::Result<Vec<f64>> {
        Ok(self.0.gradient(x, s)?.into_iter().map(|v| self.1 * v).collect())
    }
}

#[test]
fn pl_ratio_scales_linearly_with_the_objective() {
    let g = stand_in();
    let theta = vec![0.2, 0.1, -0.3];
    let obj = g.attacker_objective(theta.clone());
    let base = pl_probe(&obj, &theta, 0.4, 10, SeedStream::root(9))
        .unwrap()
        .ratio
        .unwrap();
    let scaled = pl_probe(&Scaled(&obj, 5.0), &theta, 0.4, 10, SeedStream::root(9))
        .unwrap()
        .ratio
        .unwrap();
    assert!((scaled - 5.0 * base).abs() < 1e-9 * scaled);
}

#[test]
fn lipschitz_blocks_of_the_stand_in_are_exact() {
    let g = stand_in();
    let blocks = g.blocks(0);
    let theta = [0.1, 0.2, 0.3];
    let phi = [0.3, -0.1, 0.0];
    let expect = [
        (LipschitzBlock::L11, g.a),
        (LipschitzBlock::L12, g.b),
        (LipschitzBlock::L21, g.mu),
        (LipschitzBlock::L22, g.mu),
        (LipschitzBlock::LV, (1.0 - g.eta * g.a).powi(2) * g.a),
    ];
    for (block, value) in expect {
        let rep = lipschitz_probe(&blocks, block, &theta, &phi, 8, 0.3, SeedStream::root(1)).unwrap();
        assert!(
            (rep.estimate - value).abs() < 1e-9,
            "{}: {} vs {value}",
            block.as_str(),
            rep.estimate
        );
        assert_eq!(rep.pairs_used, 8);
    }
}

#[test]
fn lipschitz_probe_skips_identical_pairs() {
    let g = stand_in();
    let rep = lipschitz_probe(
        &g.blocks(0),
        LipschitzBlock::L22,
        &[0.0; 3],
        &[0.0; 3],
        4,
        0.0,
        SeedStream::root(0),
    )
    .unwrap();
    assert_eq!(rep.pairs_used, 0);
    assert_eq!(rep.skipped, 4);
    assert_eq!(rep.estimate, 0.0);
}

#[test]
fn lipschitz_estimate_is_monotone_in_the_number_of_pairs() {
    let toy = PoisoningToy::default();
    let theta = PolicyParams::init(Player::Defender, Arch::mlp(2, 4, 1), -0.5, SeedStream::root(0));
    let blocks = metastack::diagnostics::McBlocks {
        game: &toy,
        defender: theta.clone(),
        attacker: Some(PolicyParams::init(
            Player::Attacker,
            Arch::mlp(2, 4, 1),
            -0.5,
            SeedStream::root(1),
        )),
        batch_size: 8,
        baseline: Default::default(),
        eta: 0.01,
    };
    let phi = blocks.attacker.as_ref().unwrap().flat.clone();
    let mut last = 0.0;
    for n in [2, 4, 8] {
        let rep = lipschitz_probe(
            &blocks,
            LipschitzBlock::L11,
            &theta.flat,
            &phi,
            n,
            0.1,
            SeedStream::root(2),
        )
        .unwrap();
        assert!(rep.estimate >= last);
        last = rep.estimate;
    }
    assert!(last > 0.0);
}

#[test]
fn gradient_check_suite_is_deterministic_and_passes() {
    let a = grad_check_suite(4, 4000, 4000, 4000).unwrap();
    let b = grad_check_suite(4, 4000, 4000, 4000).unwrap();
    assert_eq!(a, b);
    assert!(a.passed(), "{}", a.to_table());
    assert_eq!(a.entries.len(), 3);
}

#[test]
fn fresh_policy_has_a_clearly_positive_residual_on_the_fl_game() {
    // the default environment: 20 clients, 10 features, 3 classes, 25 rounds
    let f = family(EnvConfig::default());
    let prior = TypePrior::new(vec![
        (AttackTypeSpec::untargeted(0, 4, Behavior::Adaptive), 0.5),
        (AttackTypeSpec::untargeted(1, 4, Behavior::Rule(RuleId::Ipm)), 0.5),
    ])
    .unwrap();
    let game = f.instantiate(prior.get(0).unwrap()).unwrap();
    let theta = PolicyParams::init(
        Player::Defender,
        Arch::mlp(game.defender_obs_dim(), 8, game.defender_act_dim()),
        -0.5,
        SeedStream::root(1),
    );
    let phi = PolicyParams::init(
        Player::Attacker,
        Arch::mlp(game.attacker_obs_dim(), 8, game.attacker_act_dim()),
        -0.5,
        SeedStream::root(2),
    );
    let cfg = ResidualConfig {
        batch_size: 128,
        replicates: 64,
        ..Default::default()
    };
    let est = fose_residual(
        &theta,
        &BTreeMap::from([(0, phi)]),
        &prior,
        &f,
        0.01,
        &cfg,
        SeedStream::root(3),
    )
    .unwrap();
    assert!(
        est.defender > 10.0 * est.defender_se,
        "{} (se {})",
        est.defender,
        est.defender_se
    );
}
