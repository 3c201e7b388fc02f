//! Bayesian Stackelberg Markov game abstractions: attacker types and their
//! prior, trajectories, returns, and the [`Game`] interface every concrete
//! environment implements.

mod rollout;
mod trajectory;
mod types;

pub use rollout::{rollout, sample_batch, Actor, GameSampler, TrajectorySampler};
pub use trajectory::{discounted_return, trajectory_log_prob, EpisodeSummary, Player, Step, Trajectory};
pub use types::{sample_type, AttackCategory, AttackTypeSpec, Behavior, PriorEntry, RuleId, TypePrior};

use crate::error::Result;
use crate::rng::StreamRng;

/// Outcome of one environment transition.
#[derive(Debug, Clone)]
pub struct Transition<S> {
    pub next: S,
    pub r_d: f64,
    pub r_a: f64,
    pub malicious_present: bool,
}

/// A finite-horizon two-player Markov game with a fixed attacker type.
///
/// Actions are passed in their raw (pre-squash) policy coordinates; the game
/// maps them onto its own action boxes. `a_a` is `None` when the attacker is
/// not a learning policy (rule-based attacks live inside the environment).
pub trait Game: Sync {
    type State: Clone + Send + Sync;

    fn horizon(&self) -> usize;
    fn discount(&self) -> f64;
    fn type_id(&self) -> u32 {
        0
    }
    fn defender_obs_dim(&self) -> usize;
    fn defender_act_dim(&self) -> usize;
    fn attacker_obs_dim(&self) -> usize {
        0
    }
    fn attacker_act_dim(&self) -> usize {
        0
    }

    fn reset(&self, rng: &mut StreamRng) -> Result<Self::State>;
    fn observe_defender(&self, state: &Self::State) -> Vec<f64>;
    fn observe_attacker(&self, _state: &Self::State) -> Vec<f64> {
        Vec::new()
    }
    fn step(
        &self,
        state: &Self::State,
        a_d: &[f64],
        a_a: Option<&[f64]>,
        rng: &mut StreamRng,
    ) -> Result<Transition<Self::State>>;
    fn state_digest(&self, state: &Self::State) -> u64;
    fn summarize(&self, _state: &Self::State) -> EpisodeSummary {
        EpisodeSummary::default()
    }
}

/// Builds the game seen under one attacker type.
pub trait GameFamily: Sync {
    type Game: Game;

    fn instantiate(&self, ty: &AttackTypeSpec) -> Result<Self::Game>;
}
