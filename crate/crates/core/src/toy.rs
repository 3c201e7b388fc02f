//! Small games with exactly computable values, used as oracles for the
//! estimators and as fast test beds for the learning loops.
//!
//! [`TabularMdp`] is a 2-state, 2-action, horizon-2 single-player MDP whose
//! 16 trajectories can be enumerated. [`Enumeration`] computes its values,
//! gradients and the one-trajectory adapted objective by summing over every
//! trajectory. That code shares only the trajectory format with the Monte
//! Carlo estimators; it has its own softmax and score arithmetic.

use rand::Rng;

use crate::error::{Error, Result};
use crate::game::{AttackTypeSpec, Game, GameFamily, Transition};
use crate::policy::{Arch, PolicyParams};
use crate::rng::StreamRng;

/// Finite-horizon tabular MDP with reward `r(s, a) <= 0`.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub init: Vec<f64>,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    pub horizon: usize,
    pub discount: f64,
}

impl TabularMdp {
    /// The fixed 2-state / 2-action / H=2 instance used by every oracle check.
    pub fn canonical() -> Self {
        Self {
            init: vec![0.6, 0.4],
            transition: vec![
                vec![vec![0.8, 0.2], vec![0.3, 0.7]],
                vec![vec![0.5, 0.5], vec![0.1, 0.9]],
            ],
            reward: vec![vec![-0.2, -1.0], vec![-0.7, -0.1]],
            horizon: 2,
            discount: 0.9,
        }
    }

    pub fn n_states(&self) -> usize {
        self.init.len()
    }

    pub fn n_actions(&self) -> usize {
        self.reward[0].len()
    }

    pub fn arch(&self) -> Arch {
        Arch::TabularSoftmax {
            n_states: self.n_states(),
            n_actions: self.n_actions(),
        }
    }

    fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states()];
        v[s] = 1.0;
        v
    }

    fn draw(p: &[f64], rng: &mut StreamRng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TabularState {
    pub s: usize,
}

impl Game for TabularMdp {
    type State = TabularState;

    fn horizon(&self) -> usize {
        self.horizon
    }
    fn discount(&self) -> f64 {
        self.discount
    }
    fn defender_obs_dim(&self) -> usize {
        self.n_states()
    }
    fn defender_act_dim(&self) -> usize {
        1
    }
    fn reset(&self, rng: &mut StreamRng) -> Result<TabularState> {
        Ok(TabularState {
            s: Self::draw(&self.init, rng),
        })
    }
    fn observe_defender(&self, state: &TabularState) -> Vec<f64> {
        self.one_hot(state.s)
    }
    fn step(
        &self,
        state: &TabularState,
        a_d: &[f64],
        _a_a: Option<&[f64]>,
        rng: &mut StreamRng,
    ) -> Result<Transition<TabularState>> {
        let a = a_d[0] as usize;
        if a >= self.n_actions() {
            return Err(Error::validation(format!("action {a} out of range")));
        }
        let next = Self::draw(&self.transition[state.s][a], rng);
        Ok(Transition {
            next: TabularState { s: next },
            r_d: self.reward[state.s][a],
            r_a: 0.0,
            malicious_present: false,
        })
    }
    fn state_digest(&self, state: &TabularState) -> u64 {
        state.s as u64
    }
}

impl GameFamily for TabularMdp {
    type Game = TabularMdp;
    fn instantiate(&self, _ty: &AttackTypeSpec) -> Result<TabularMdp> {
        Ok(self.clone())
    }
}

/// Exact quantities of a [`TabularMdp`] under a softmax-tabular policy,
/// computed by summing over all `(S * A)^H * ...` trajectories.
pub struct Enumeration<'a> {
    mdp: &'a TabularMdp,
    paths: Vec<Path>,
}

struct Path {
    states: Vec<usize>,
    actions: Vec<usize>,
    /// Product of initial and transition probabilities (policy excluded).
    env_prob: f64,
    ret: f64,
}

fn softmax_row(theta: &[f64], n_actions: usize, s: usize) -> Vec<f64> {
    let row = &theta[s * n_actions..(s + 1) * n_actions];
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl<'a> Enumeration<'a> {
    pub fn new(mdp: &'a TabularMdp) -> Self {
        let mut paths = Vec::new();
        let ns = mdp.n_states();
        let na = mdp.n_actions();
        let mut stack: Vec<(Vec<usize>, Vec<usize>, f64)> =
            (0..ns).map(|s| (vec![s], vec![], mdp.init[s])).collect();
        while let Some((states, actions, p)) = stack.pop() {
            if actions.len() == mdp.horizon {
                let mut ret = 0.0;
                let mut w = 1.0;
                for t in 0..mdp.horizon {
                    w *= mdp.discount;
                    ret += w * mdp.reward[states[t]][actions[t]];
                }
                paths.push(Path {
                    states: states[..mdp.horizon].to_vec(),
                    actions,
                    env_prob: p,
                    ret,
                });
                continue;
            }
            let s = *states.last().unwrap();
            for a in 0..na {
                let last = actions.len() + 1 == mdp.horizon;
                if last {
                    let mut st = states.clone();
                    st.push(0);
                    let mut ac = actions.clone();
                    ac.push(a);
                    stack.push((st, ac, p));
                } else {
                    for s2 in 0..ns {
                        let mut st = states.clone();
                        st.push(s2);
                        let mut ac = actions.clone();
                        ac.push(a);
                        stack.push((st, ac, p * mdp.transition[s][a][s2]));
                    }
                }
            }
        }
        Self { mdp, paths }
    }

    pub fn n_trajectories(&self) -> usize {
        self.paths.len()
    }

    fn policy_prob(&self, theta: &[f64], path: &Path) -> f64 {
        let na = self.mdp.n_actions();
        path.states
            .iter()
            .zip(&path.actions)
            .map(|(&s, &a)| softmax_row(theta, na, s)[a])
            .product()
    }

    fn log_q_grad(&self, theta: &[f64], path: &Path) -> Vec<f64> {
        let na = self.mdp.n_actions();
        let mut g = vec![0.0; theta.len()];
        for (&s, &a) in path.states.iter().zip(&path.actions) {
            let p = softmax_row(theta, na, s);
            for b in 0..na {
                g[s * na + b] -= p[b];
            }
            g[s * na + a] += 1.0;
        }
        g
    }

    /// Exact `J(theta) = sum_tau q(tau) R(tau)`.
    pub fn value(&self, theta: &[f64]) -> f64 {
        self.paths
            .iter()
            .map(|p| p.env_prob * self.policy_prob(theta, p) * p.ret)
            .sum()
    }

    /// Exact `grad J(theta) = sum_tau q(tau) R(tau) grad log q(tau)`.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        for p in &self.paths {
            let w = p.env_prob * self.policy_prob(theta, p) * p.ret;
            for (gi, si) in g.iter_mut().zip(self.log_q_grad(theta, p)) {
                *gi += w * si;
            }
        }
        g
    }

    /// Central differences (step `h`) of [`Self::gradient`]; entry `(i, j)`
    /// is `d grad_i / d theta_j`.
    pub fn hessian_fd(&self, theta: &[f64], h: f64) -> Vec<Vec<f64>> {
        let n = theta.len();
        let mut out = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut up = theta.to_vec();
            up[j] += h;
            let mut dn = theta.to_vec();
            dn[j] -= h;
            let gu = self.gradient(&up);
            let gd = self.gradient(&dn);
            for i in 0..n {
                out[i][j] = (gu[i] - gd[i]) / (2.0 * h);
            }
        }
        out
    }

    /// Adapted objective with a single round-one trajectory and no baseline:
    /// `L(theta) = sum_tau q(tau; theta) J(theta + eta R(tau) grad log q(tau; theta))`.
    pub fn adapted_objective(&self, theta: &[f64], eta: f64) -> f64 {
        self.paths
            .iter()
            .map(|p| {
                let q = p.env_prob * self.policy_prob(theta, p);
                let s = self.log_q_grad(theta, p);
                let adapted: Vec<f64> = theta.iter().zip(&s).map(|(t, si)| t + eta * p.ret * si).collect();
                q * self.value(&adapted)
            })
            .sum()
    }

    /// Central differences (step `h`) of [`Self::adapted_objective`].
    pub fn adapted_gradient_fd(&self, theta: &[f64], eta: f64, h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|j| {
                let mut up = theta.to_vec();
                up[j] += h;
                let mut dn = theta.to_vec();
                dn[j] -= h;
                (self.adapted_objective(&up, eta) - self.adapted_objective(&dn, eta)) / (2.0 * h)
            })
            .collect()
    }

    /// Exact `E[sum_t log pi]`-free check value: probability mass of all
    /// enumerated trajectories (1 up to rounding).
    pub fn total_mass(&self, theta: &[f64]) -> f64 {
        self.paths
            .iter()
            .map(|p| p.env_prob * self.policy_prob(theta, p))
            .sum()
    }
}

/// Single-step continuous bandit with reward `-(a - target)^2`, observation `[1]`.
#[derive(Debug, Clone)]
pub struct Bandit {
    pub target: f64,
    pub discount: f64,
}

impl Bandit {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            discount: 0.99,
        }
    }

    /// Gaussian-MLP policy architecture matching the bandit's shapes.
    pub fn arch(hidden: usize) -> Arch {
        Arch::mlp(1, hidden, 1)
    }

    /// Expected discounted return of a Gaussian policy with mean `mu` and std `sigma`.
    pub fn expected_return(&self, policy: &PolicyParams) -> f64 {
        let mu = policy.mode(&[1.0])[0];
        let s = policy.flat[policy.dim() - 1].max(crate::policy::LOG_STD_FLOOR);
        let var = (2.0 * s).exp();
        -self.discount * ((mu - self.target).powi(2) + var)
    }
}

impl Game for Bandit {
    type State = ();

    fn horizon(&self) -> usize {
        1
    }
    fn discount(&self) -> f64 {
        self.discount
    }
    fn defender_obs_dim(&self) -> usize {
        1
    }
    fn defender_act_dim(&self) -> usize {
        1
    }
    fn reset(&self, _rng: &mut StreamRng) -> Result<()> {
        Ok(())
    }
    fn observe_defender(&self, _state: &()) -> Vec<f64> {
        vec![1.0]
    }
    fn step(
        &self,
        _state: &(),
        a_d: &[f64],
        _a_a: Option<&[f64]>,
        _rng: &mut StreamRng,
    ) -> Result<Transition<()>> {
        let d = a_d[0] - self.target;
        Ok(Transition {
            next: (),
            r_d: -d * d,
            r_a: 0.0,
            malicious_present: false,
        })
    }
    fn state_digest(&self, _state: &()) -> u64 {
        0
    }
}

/// Bandits whose optimal action depends on the attacker type: type id `k`
/// maps to `targets[k]`. Distinct targets make the types demand conflicting
/// defenses.
#[derive(Debug, Clone)]
pub struct BanditFamily {
    pub targets: Vec<(u32, f64)>,
}

impl GameFamily for BanditFamily {
    type Game = Bandit;
    fn instantiate(&self, ty: &AttackTypeSpec) -> Result<Bandit> {
        self.targets
            .iter()
            .find(|(id, _)| *id == ty.id)
            .map(|(_, t)| Bandit::new(*t))
            .ok_or_else(|| Error::validation(format!("no bandit target for type {}", ty.id)))
    }
}

/// One-dimensional poisoning game: a scalar model `w` is pulled toward 1 by
/// `n - 1` honest clients while one malicious client submits
/// `cap * tanh(a)` (adaptive types) or `cap` (rule types). The defender's raw
/// action sets a clipping bound `0.05 + 2 sigmoid(d)` applied to every update
/// before averaging. `r_D = -(w - 1)^2 = -r_A`; observations are `[w, t/H]`.
#[derive(Debug, Clone)]
pub struct PoisoningToy {
    pub n_clients: usize,
    pub lr: f64,
    pub cap: f64,
    pub horizon: usize,
    pub discount: f64,
    pub adaptive: bool,
    pub type_id: u32,
}

impl Default for PoisoningToy {
    fn default() -> Self {
        Self {
            n_clients: 5,
            lr: 0.5,
            cap: 2.0,
            horizon: 5,
            discount: 0.99,
            adaptive: true,
            type_id: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyState {
    pub w: f64,
    pub t: usize,
}

impl Game for PoisoningToy {
    type State = ToyState;

    fn horizon(&self) -> usize {
        self.horizon
    }
    fn discount(&self) -> f64 {
        self.discount
    }
    fn type_id(&self) -> u32 {
        self.type_id
    }
    fn defender_obs_dim(&self) -> usize {
        2
    }
    fn defender_act_dim(&self) -> usize {
        1
    }
    fn attacker_obs_dim(&self) -> usize {
        2
    }
    fn attacker_act_dim(&self) -> usize {
        usize::from(self.adaptive)
    }
    fn reset(&self, _rng: &mut StreamRng) -> Result<ToyState> {
        Ok(ToyState { w: 0.0, t: 0 })
    }
    fn observe_defender(&self, s: &ToyState) -> Vec<f64> {
        vec![s.w, s.t as f64 / self.horizon as f64]
    }
    fn observe_attacker(&self, s: &ToyState) -> Vec<f64> {
        self.observe_defender(s)
    }
    fn step(
        &self,
        s: &ToyState,
        a_d: &[f64],
        a_a: Option<&[f64]>,
        _rng: &mut StreamRng,
    ) -> Result<Transition<ToyState>> {
        let bound = 0.05 + 2.0 / (1.0 + (-a_d[0]).exp());
        let bad = match (self.adaptive, a_a) {
            (true, Some(a)) => self.cap * a[0].tanh(),
            (true, None) => return Err(Error::validation("adaptive toy attacker needs an action")),
            (false, _) => self.cap,
        };
        let honest = self.lr * (s.w - 1.0);
        let clip = |u: f64| u.clamp(-bound, bound);
        let n = self.n_clients as f64;
        let aggr = ((n - 1.0) * clip(honest) + clip(bad)) / n;
        let w = s.w - aggr;
        let loss = (w - 1.0).powi(2);
        Ok(Transition {
            next: ToyState { w, t: s.t + 1 },
            r_d: -loss,
            r_a: loss,
            malicious_present: true,
        })
    }
    fn state_digest(&self, s: &ToyState) -> u64 {
        crate::rng::digest_f64(&[s.w, s.t as f64])
    }
}

/// Instantiates [`PoisoningToy`] per type: adaptive types learn their push,
/// rule types push with the full `cap`.
#[derive(Debug, Clone, Default)]
pub struct PoisoningToyFamily {
    pub base: PoisoningToy,
}

impl GameFamily for PoisoningToyFamily {
    type Game = PoisoningToy;
    fn instantiate(&self, ty: &AttackTypeSpec) -> Result<PoisoningToy> {
        Ok(PoisoningToy {
            adaptive: ty.is_adaptive(),
            type_id: ty.id,
            ..self.base.clone()
        })
    }
}
