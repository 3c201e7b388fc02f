use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::gaussian::{self, Layout};
use super::tabular;
use crate::error::{ensure_finite, Error, Result};
use crate::game::Player;
use crate::rng::{digest_f64, SeedStream, StreamRng};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// One tanh hidden layer, Gaussian head with a learned per-dimension log std.
    GaussianMlp {
        obs_dim: usize,
        hidden: usize,
        act_dim: usize,
    },
    /// Softmax over actions, one logit per (state, action).
    TabularSoftmax { n_states: usize, n_actions: usize },
}

impl Arch {
    pub fn mlp(obs_dim: usize, hidden: usize, act_dim: usize) -> Self {
        Arch::GaussianMlp {
            obs_dim,
            hidden,
            act_dim,
        }
    }

    pub fn param_len(&self) -> usize {
        match *self {
            Arch::GaussianMlp {
                obs_dim,
                hidden,
                act_dim,
            } => Layout {
                obs: obs_dim,
                hidden,
                act: act_dim,
            }
            .len(),
            Arch::TabularSoftmax { n_states, n_actions } => n_states * n_actions,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match *self {
            Arch::GaussianMlp { obs_dim, .. } => obs_dim,
            Arch::TabularSoftmax { n_states, .. } => n_states,
        }
    }

    pub fn act_dim(&self) -> usize {
        match *self {
            Arch::GaussianMlp { act_dim, .. } => act_dim,
            Arch::TabularSoftmax { .. } => 1,
        }
    }

    fn layout(&self) -> Option<Layout> {
        match *self {
            Arch::GaussianMlp {
                obs_dim,
                hidden,
                act_dim,
            } => Some(Layout {
                obs: obs_dim,
                hidden,
                act: act_dim,
            }),
            Arch::TabularSoftmax { .. } => None,
        }
    }
}

/// Parameters of one player's stochastic policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub player: Player,
    pub arch: Arch,
    pub flat: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    #[serde(flatten)]
    params: PolicyParams,
}

impl PolicyParams {
    pub fn new(player: Player, arch: Arch, flat: Vec<f64>) -> Result<Self> {
        let p = Self { player, arch, flat };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(player: Player, arch: Arch) -> Self {
        Self {
            player,
            arch,
            flat: vec![0.0; arch.param_len()],
        }
    }

    /// Random initialization: scaled-normal hidden weights, a small output
    /// layer so initial means sit near zero, and a constant `log_std`.
    pub fn init(player: Player, arch: Arch, log_std: f64, stream: SeedStream) -> Self {
        let mut p = Self::zeros(player, arch);
        let mut rng = stream.rng();
        if let Some(l) = arch.layout() {
            let w1 = Normal::new(0.0, 1.0 / (l.obs.max(1) as f64).sqrt()).unwrap();
            let w2 = Normal::new(0.0, 0.1 / (l.hidden.max(1) as f64).sqrt()).unwrap();
            let n_w1 = l.hidden * l.obs;
            let w2_start = l.hidden * (l.obs + 1);
            for v in &mut p.flat[..n_w1] {
                *v = w1.sample(&mut rng);
            }
            for v in &mut p.flat[w2_start..w2_start + l.act * l.hidden] {
                *v = w2.sample(&mut rng);
            }
            for j in 0..l.act {
                p.flat[l.log_std(j)] = log_std;
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.flat.len() != self.arch.param_len() {
            return Err(Error::Dimension {
                context: "policy parameter vector",
                expected: self.arch.param_len(),
                actual: self.flat.len(),
            });
        }
        ensure_finite(&self.flat, || {
            format!("{} policy parameters", self.player.as_str())
        })
    }

    pub fn dim(&self) -> usize {
        self.flat.len()
    }

    pub fn digest(&self) -> u64 {
        digest_f64(&self.flat)
    }

    pub fn with_flat(&self, flat: Vec<f64>) -> Self {
        Self {
            player: self.player,
            arch: self.arch,
            flat,
        }
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.arch.obs_dim() {
            return Err(Error::Dimension {
                context: "policy observation",
                expected: self.arch.obs_dim(),
                actual: obs.len(),
            });
        }
        Ok(())
    }

    /// Samples a raw (pre-squash) action and returns it with its log-density.
    pub fn act(&self, obs: &[f64], rng: &mut StreamRng) -> Result<(Vec<f64>, f64)> {
        self.check_obs(obs)?;
        ensure_finite(&self.flat, || {
            format!("{} policy parameters", self.player.as_str())
        })?;
        let action = match self.arch {
            Arch::GaussianMlp { .. } => gaussian::sample(&self.arch.layout().unwrap(), &self.flat, obs, rng),
            Arch::TabularSoftmax { n_actions, .. } => tabular::sample(&self.flat, n_actions, obs, rng),
        };
        let lp = self.log_prob(obs, &action);
        Ok((action, lp))
    }

    /// Mean action (Gaussian) or most likely action (tabular).
    pub fn mode(&self, obs: &[f64]) -> Vec<f64> {
        match self.arch {
            Arch::GaussianMlp { .. } => gaussian::mean(&self.arch.layout().unwrap(), &self.flat, obs),
            Arch::TabularSoftmax { n_actions, .. } => {
                let p = tabular::probs(&self.flat, n_actions, tabular::state_of(obs));
                let best = (0..n_actions).fold(0, |b, a| if p[a] > p[b] { a } else { b });
                vec![best as f64]
            }
        }
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> f64 {
        match self.arch {
            Arch::GaussianMlp { .. } => {
                gaussian::log_prob(&self.arch.layout().unwrap(), &self.flat, obs, action)
            }
            Arch::TabularSoftmax { n_actions, .. } => tabular::log_prob(&self.flat, n_actions, obs, action),
        }
    }

    /// Gradient of `log pi(action | obs)` with respect to the flat parameters.
    pub fn score(&self, obs: &[f64], action: &[f64]) -> Vec<f64> {
        match self.arch {
            Arch::GaussianMlp { .. } => {
                gaussian::score(&self.arch.layout().unwrap(), &self.flat, obs, action)
            }
            Arch::TabularSoftmax { n_actions, .. } => tabular::score(&self.flat, n_actions, obs, action),
        }
    }

    /// Hessian of `log pi(action | obs)` with respect to the flat parameters.
    pub fn log_prob_hessian(&self, obs: &[f64], action: &[f64]) -> DMatrix<f64> {
        match self.arch {
            Arch::GaussianMlp { .. } => {
                gaussian::log_prob_hessian(&self.arch.layout().unwrap(), &self.flat, obs, action)
            }
            Arch::TabularSoftmax { n_actions, .. } => tabular::log_prob_hessian(&self.flat, n_actions, obs),
        }
    }

    /// JSON checkpoint `{version, player, arch{...}, flat:[...]}`.
    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        })?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        ck.params.validate()?;
        Ok(ck.params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}
