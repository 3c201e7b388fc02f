//! Rollout records, discounted returns and cached trajectory log-probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Player {
    Defender,
    Attacker,
}

impl Player {
    pub fn as_str(self) -> &'static str {
        match self {
            Player::Defender => "defender",
            Player::Attacker => "attacker",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state_digest: u64,
    pub defender_obs: Vec<f64>,
    pub attacker_obs: Vec<f64>,
    /// Pre-squash defender action as sampled from the policy.
    pub a_d: Vec<f64>,
    /// Pre-squash attacker action; empty when the attacker follows a rule.
    pub a_a: Vec<f64>,
    pub r_d: f64,
    pub r_a: f64,
    pub logp_d: Option<f64>,
    pub logp_a: Option<f64>,
    /// Whether the round's identity vector flagged at least one malicious client.
    pub malicious_present: bool,
}

impl Step {
    pub fn obs(&self, who: Player) -> &[f64] {
        match who {
            Player::Defender => &self.defender_obs,
            Player::Attacker => &self.attacker_obs,
        }
    }

    pub fn action(&self, who: Player) -> &[f64] {
        match who {
            Player::Defender => &self.a_d,
            Player::Attacker => &self.a_a,
        }
    }

    pub fn reward(&self, who: Player) -> f64 {
        match who {
            Player::Defender => self.r_d,
            Player::Attacker => self.r_a,
        }
    }

    pub fn logp(&self, who: Player) -> Option<f64> {
        match who {
            Player::Defender => self.logp_d,
            Player::Attacker => self.logp_a,
        }
    }
}

/// End-of-episode model quality, filled in by environments that have one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub clean_loss: Option<f64>,
    pub clean_acc: Option<f64>,
    pub backdoor_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    steps: Vec<Step>,
    discount: f64,
    type_id: u32,
    /// Digest of the defender parameters that generated the actions.
    pub defender_digest: Option<u64>,
    pub attacker_digest: Option<u64>,
    pub summary: EpisodeSummary,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, horizon: usize, discount: f64, type_id: u32) -> Result<Self> {
        let tau = Self {
            steps,
            discount,
            type_id,
            defender_digest: None,
            attacker_digest: None,
            summary: EpisodeSummary::default(),
        };
        tau.validate(horizon)?;
        Ok(tau)
    }

    fn validate(&self, horizon: usize) -> Result<()> {
        if self.steps.len() != horizon {
            return Err(Error::Dimension {
                context: "trajectory length",
                expected: horizon,
                actual: self.steps.len(),
            });
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::validation(format!(
                "discount {} outside (0, 1)",
                self.discount
            )));
        }
        for (t, s) in self.steps.iter().enumerate() {
            if !(s.r_d <= 0.0) {
                return Err(Error::validation(format!(
                    "defender reward {} at step {t} is not <= 0",
                    s.r_d
                )));
            }
            if !s.r_a.is_finite() {
                return Err(Error::NonFinite(format!("attacker reward at step {t}")));
            }
            if !s.malicious_present && s.r_a != 0.0 {
                return Err(Error::validation(format!(
                    "attacker reward {} at step {t} without any sampled malicious client",
                    s.r_a
                )));
            }
            for lp in [s.logp_d, s.logp_a].into_iter().flatten() {
                if !lp.is_finite() {
                    return Err(Error::NonFinite(format!("cached log-probability at step {t}")));
                }
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn type_id(&self) -> u32 {
        self.type_id
    }

    pub fn digest(&self, who: Player) -> Option<u64> {
        match who {
            Player::Defender => self.defender_digest,
            Player::Attacker => self.attacker_digest,
        }
    }

    /// Copy of the trajectory with every reward of both players multiplied by `k`.
    pub fn scaled_rewards(&self, k: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.steps {
            s.r_d *= k;
            s.r_a *= k;
        }
        out
    }
}

/// `sum_{t=1..H} gamma^t r_t`, with the first step weighted by `gamma`.
pub fn discounted_return(tau: &Trajectory, who: Player) -> f64 {
    let gamma = tau.discount;
    let mut weight = 1.0;
    let mut total = 0.0;
    for s in &tau.steps {
        weight *= gamma;
        total += weight * s.reward(who);
    }
    total
}

/// Sum of the cached per-step log-probabilities of one player's actions.
///
/// Transition-kernel factors are not included; they do not depend on the
/// policy parameters and drop out of every score-function gradient.
pub fn trajectory_log_prob(tau: &Trajectory, which: Player) -> Result<f64> {
    let label = match which {
        Player::Defender => "defender",
        Player::Attacker => "attacker",
    };
    tau.steps
        .iter()
        .map(|s| s.logp(which).ok_or(Error::MissingLogProb(label)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn step(r_d: f64, logp: f64) -> Step {
        Step {
            state_digest: 0,
            defender_obs: vec![],
            attacker_obs: vec![],
            a_d: vec![0.0],
            a_a: vec![],
            r_d,
            r_a: 0.0,
            logp_d: Some(logp),
            logp_a: None,
            malicious_present: false,
        }
    }

    #[test]
    fn zero_rewards_zero_return() {
        let tau = Trajectory::new(vec![step(0.0, 0.0); 4], 4, 0.9, 0).unwrap();
        assert_eq!(discounted_return(&tau, Player::Defender), 0.0);
    }

    #[test]
    fn two_step_return() {
        let tau = Trajectory::new(vec![step(-1.0, 0.0), step(-1.0, 0.0)], 2, 0.5, 0).unwrap();
        assert_eq!(discounted_return(&tau, Player::Defender), -0.75);
    }

    #[test]
    fn log_prob_is_sum_of_cache() {
        let tau = Trajectory::new(vec![step(0.0, -0.919)], 1, 0.5, 0).unwrap();
        assert_eq!(trajectory_log_prob(&tau, Player::Defender).unwrap(), -0.919);
        let tau =
            Trajectory::new(vec![step(0.0, -1.0), step(0.0, -2.0), step(0.0, -3.0)], 3, 0.5, 0).unwrap();
        assert_eq!(trajectory_log_prob(&tau, Player::Defender).unwrap(), -6.0);
        let err = trajectory_log_prob(&tau, Player::Attacker).unwrap_err();
        assert!(err.to_string().contains("re-run the rollout"));
    }

    #[test]
    fn invariants_enforced() {
        assert!(Trajectory::new(vec![step(0.5, 0.0)], 1, 0.5, 0).is_err());
        assert!(Trajectory::new(vec![step(-0.5, 0.0)], 2, 0.5, 0).is_err());
        assert!(Trajectory::new(vec![step(-0.5, 0.0)], 1, 1.0, 0).is_err());
        let mut s = step(-0.5, 0.0);
        s.r_a = 1.0;
        assert!(Trajectory::new(vec![s.clone()], 1, 0.5, 0).is_err());
        s.malicious_present = true;
        assert!(Trajectory::new(vec![s], 1, 0.5, 0).is_ok());
        assert!(Trajectory::new(vec![step(-0.5, f64::NAN)], 1, 0.5, 0).is_err());
    }
}
