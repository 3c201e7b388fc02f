use rayon::prelude::*;

use super::{Game, Step, Trajectory};
use crate::error::Result;
use crate::policy::PolicyParams;
use crate::rng::SeedStream;

/// Who chooses a player's actions during a rollout.
#[derive(Debug, Clone, Copy)]
pub enum Actor<'a> {
    Policy(&'a PolicyParams),
    /// A constant raw action; no log-probability is cached.
    Fixed(&'a [f64]),
}

impl Actor<'_> {
    fn digest(&self) -> Option<u64> {
        match self {
            Actor::Policy(p) => Some(p.digest()),
            Actor::Fixed(_) => None,
        }
    }
}

/// Plays one episode. All randomness (policy sampling and transitions) comes
/// from `stream`, so the trajectory is a pure function of its inputs.
pub fn rollout<G: Game>(
    game: &G,
    defender: Actor<'_>,
    attacker: Option<Actor<'_>>,
    stream: SeedStream,
) -> Result<Trajectory> {
    let mut rng = stream.rng();
    let mut state = game.reset(&mut rng)?;
    let horizon = game.horizon();
    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let defender_obs = game.observe_defender(&state);
        let attacker_obs = if attacker.is_some() {
            game.observe_attacker(&state)
        } else {
            Vec::new()
        };
        let (a_d, logp_d) = match defender {
            Actor::Policy(p) => {
                let (a, lp) = p.act(&defender_obs, &mut rng)?;
                (a, Some(lp))
            }
            Actor::Fixed(a) => (a.to_vec(), None),
        };
        let (a_a, logp_a) = match attacker {
            Some(Actor::Policy(p)) => {
                let (a, lp) = p.act(&attacker_obs, &mut rng)?;
                (a, Some(lp))
            }
            Some(Actor::Fixed(a)) => (a.to_vec(), None),
            None => (Vec::new(), None),
        };
        let tr = game.step(&state, &a_d, attacker.map(|_| a_a.as_slice()), &mut rng)?;
        steps.push(Step {
            state_digest: game.state_digest(&state),
            defender_obs,
            attacker_obs,
            a_d,
            a_a,
            r_d: tr.r_d,
            r_a: tr.r_a,
            logp_d,
            logp_a,
            malicious_present: tr.malicious_present,
        });
        state = tr.next;
    }
    let mut tau = Trajectory::new(steps, horizon, game.discount(), game.type_id())?;
    tau.defender_digest = defender.digest();
    tau.attacker_digest = attacker.and_then(|a| a.digest());
    tau.summary = game.summarize(&state);
    Ok(tau)
}

/// `n` independent rollouts; trajectory `i` draws from `stream.index(i)`.
/// Runs on the current rayon pool and returns trajectories in index order.
pub fn sample_batch<G: Game>(
    game: &G,
    defender: Actor<'_>,
    attacker: Option<Actor<'_>>,
    n: usize,
    stream: SeedStream,
) -> Result<Vec<Trajectory>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| rollout(game, defender, attacker, stream.index(i)))
        .collect()
}

/// Source of on-policy trajectory batches for estimators that must resample
/// (adaptation, meta-gradients, best responses).
pub trait TrajectorySampler: Sync {
    fn sample(
        &self,
        defender: &PolicyParams,
        attacker: Option<&PolicyParams>,
        n: usize,
        stream: SeedStream,
    ) -> Result<Vec<Trajectory>>;
}

/// Samples from a concrete [`Game`].
pub struct GameSampler<'g, G: Game> {
    pub game: &'g G,
}

impl<'g, G: Game> GameSampler<'g, G> {
    pub fn new(game: &'g G) -> Self {
        Self { game }
    }
}

impl<G: Game> TrajectorySampler for GameSampler<'_, G> {
    fn sample(
        &self,
        defender: &PolicyParams,
        attacker: Option<&PolicyParams>,
        n: usize,
        stream: SeedStream,
    ) -> Result<Vec<Trajectory>> {
        sample_batch(
            self.game,
            Actor::Policy(defender),
            attacker.map(Actor::Policy),
            n,
            stream,
        )
    }
}
