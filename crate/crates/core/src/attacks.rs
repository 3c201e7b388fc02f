//! Malicious client updates: the rulebook attacks (IPM, LMP, EB, static
//! backdoor poisoning) and the mapping from an adaptive attacker's action
//! to an update vector.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::defenses::{self, sigmoid, trim_count, AggregatorId};
use crate::env::{Dataset, PoisonedSet};
use crate::error::{Error, Result};
use crate::game::AttackTypeSpec;
use crate::linalg::{norm, scale};
use crate::rng::{SeedStream, StreamRng};

/// Low-dimensional action of the adaptive attacker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackAction {
    pub boost: f64,
    /// `-1` is anti-parallel to the benign mean, `+1` parallel.
    pub direction_mix: f64,
    pub noise_scale: f64,
}

impl AttackAction {
    pub const DIM: usize = 3;

    pub fn validate(&self, boost_cap: f64) -> Result<()> {
        if !(self.boost >= 0.0 && self.boost <= boost_cap) {
            return Err(Error::validation(format!(
                "boost {} outside [0, {boost_cap}]",
                self.boost
            )));
        }
        if !(-1.0..=1.0).contains(&self.direction_mix) {
            return Err(Error::validation(format!(
                "direction_mix {} outside [-1, 1]",
                self.direction_mix
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::validation(format!(
                "noise_scale {} must be >= 0",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Box for squashed attacker actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackBox {
    pub boost_cap: f64,
    pub noise_cap: f64,
}

impl Default for AttackBox {
    fn default() -> Self {
        Self {
            boost_cap: 10.0,
            noise_cap: 0.1,
        }
    }
}

impl AttackBox {
    pub fn squash(&self, raw: &[f64]) -> Result<AttackAction> {
        if raw.len() != AttackAction::DIM {
            return Err(Error::Dimension {
                context: "attack action",
                expected: AttackAction::DIM,
                actual: raw.len(),
            });
        }
        Ok(AttackAction {
            boost: self.boost_cap * sigmoid(raw[0]),
            direction_mix: raw[1].tanh(),
            noise_scale: self.noise_cap * sigmoid(raw[2]),
        })
    }
}

fn mean_of(updates: &[Vec<f64>]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::Empty("benign update list"));
    }
    defenses::aggregate_mean(updates)
}

/// Inner product manipulation: `-eps * mean(benign)`.
pub fn ipm_update(benign: &[Vec<f64>], eps: f64) -> Result<Vec<f64>> {
    if !(eps >= 0.0) {
        return Err(Error::validation(format!("ipm eps {eps} must be >= 0")));
    }
    Ok(scale(-eps, &mean_of(benign)?))
}

/// The aggregation rule an LMP attacker crafts against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LmpTarget {
    Mean,
    TrimmedMean { beta: f64 },
    Median,
    Krum { f: usize },
}

impl LmpTarget {
    pub fn from_aggregator(id: AggregatorId, beta: f64, krum_f: usize) -> Result<Self> {
        match id {
            AggregatorId::Mean => Ok(LmpTarget::Mean),
            AggregatorId::TrimmedMean => Ok(LmpTarget::TrimmedMean { beta }),
            AggregatorId::Median => Ok(LmpTarget::Median),
            AggregatorId::Krum => Ok(LmpTarget::Krum { f: krum_f }),
            AggregatorId::FlTrust => Err(Error::Unsupported(
                "lmp supports mean, tmean, median and krum".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmpConfig {
    pub lambda0: f64,
    pub max_halvings: usize,
}

impl Default for LmpConfig {
    fn default() -> Self {
        Self {
            lambda0: 10.0,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmpResult {
    pub update: Vec<f64>,
    pub lambda: f64,
    pub accepted: bool,
}

/// `-lambda * ||m|| * sign(m) / ||sign(m)||` for the benign mean `m`.
pub fn lmp_direction(benign_mean: &[f64], lambda: f64) -> Vec<f64> {
    let s: Vec<f64> = benign_mean
        .iter()
        .map(|v| {
            if *v > 0.0 {
                1.0
            } else if *v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let sn = norm(&s);
    if sn == 0.0 {
        return vec![0.0; benign_mean.len()];
    }
    scale(-lambda * norm(benign_mean) / sn, &s)
}

fn within_kept(updates: &[Vec<f64>], crafted: &[f64], drop: usize) -> bool {
    let n = updates.len();
    (0..crafted.len()).all(|j| {
        let mut col: Vec<f64> = updates.iter().map(|u| u[j]).collect();
        col.sort_by(f64::total_cmp);
        crafted[j] >= col[drop] && crafted[j] <= col[n - 1 - drop]
    })
}

/// Whether `n_copies` of `crafted`, submitted next to `benign`, influence
/// the aggregate: Krum selects a crafted copy; trimmed mean and median keep
/// the crafted value in every coordinate; the mean always accepts.
pub fn lmp_accepts(target: LmpTarget, benign: &[Vec<f64>], crafted: &[f64], n_copies: usize) -> Result<bool> {
    let mut all = benign.to_vec();
    all.extend(std::iter::repeat_n(crafted.to_vec(), n_copies));
    let n = all.len();
    match target {
        LmpTarget::Mean => Ok(true),
        LmpTarget::TrimmedMean { beta } => Ok(within_kept(&all, crafted, trim_count(n, beta))),
        LmpTarget::Median => Ok(within_kept(&all, crafted, (n - 1) / 2)),
        LmpTarget::Krum { f } => Ok(defenses::krum_select(&all, f)? >= benign.len()),
    }
}

/// Local model poisoning: directed deviation against the benign mean with
/// magnitude found by halving from `lambda0` until the aggregator accepts.
pub fn lmp_update(
    benign: &[Vec<f64>],
    target: LmpTarget,
    n_copies: usize,
    cfg: &LmpConfig,
) -> Result<LmpResult> {
    let m = mean_of(benign)?;
    let mut lambda = cfg.lambda0;
    for k in 0..=cfg.max_halvings {
        let update = lmp_direction(&m, lambda);
        if lmp_accepts(target, benign, &update, n_copies.max(1))? {
            return Ok(LmpResult {
                update,
                lambda,
                accepted: true,
            });
        }
        if k < cfg.max_halvings {
            lambda *= 0.5;
        }
    }
    Ok(LmpResult {
        update: lmp_direction(&m, lambda),
        lambda,
        accepted: false,
    })
}

/// Explicit boosting: `boost * grad`.
pub fn eb_update(local_malicious_grad: &[f64], boost: f64) -> Result<Vec<f64>> {
    if !(boost >= 0.0) {
        return Err(Error::validation(format!("boost {boost} must be >= 0")));
    }
    Ok(scale(boost, local_malicious_grad))
}

/// Adds the trigger to `ceil(fraction * len)` rng-selected samples, clamps
/// their features to `[-bound, bound]`, and relabels them to `target`.
pub fn backdoor_poison(
    data: &Dataset,
    trigger: &[f64],
    target: usize,
    fraction: f64,
    bound: f64,
    stream: SeedStream,
) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation(format!(
            "poison fraction {fraction} outside (0, 1]"
        )));
    }
    if trigger.len() != data.dim() {
        return Err(Error::Dimension {
            context: "backdoor trigger",
            expected: data.dim(),
            actual: trigger.len(),
        });
    }
    if target >= data.classes() {
        return Err(Error::validation(format!(
            "target label {target} >= class count {}",
            data.classes()
        )));
    }
    let n = data.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = stream.rng();
    let chosen = sample_indices(&mut rng, n, k);
    let (dim, classes) = (data.dim(), data.classes());
    let (mut x, mut y) = data.clone().into_parts();
    for i in chosen.iter() {
        for (v, t) in x[i].iter_mut().zip(trigger) {
            *v = (*v + t).clamp(-bound, bound);
        }
        y[i] = target;
    }
    Dataset::new_allow_empty(dim, classes, x, y)
}

/// Every sample triggered and relabelled, for measuring backdoor success.
pub fn backdoor_eval_set(data: &Dataset, ty: &AttackTypeSpec, bound: f64) -> Result<PoisonedSet> {
    let (trigger, target) = match (&ty.trigger, ty.target_label) {
        (Some(t), Some(c)) => (t, c),
        _ => {
            return Err(Error::validation(format!(
                "attack type {} has no backdoor trigger/target",
                ty.id
            )))
        }
    };
    let poisoned = backdoor_poison(data, trigger, target, 1.0, bound, SeedStream::root(0))?;
    Ok(PoisonedSet {
        data: poisoned,
        target_label: target,
    })
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0).then(|| scale(1.0 / n, v))
}

/// `boost * [mix * unit(benign_mean) + (1 - |mix|) * unit(own_grad)] *
/// ||benign_mean|| + noise_scale * N(0, I)`.
///
/// A zero benign mean falls back to the own-gradient direction at the own
/// gradient's scale; if both are zero only the noise term remains.
pub fn apply_attack_action(
    action: &AttackAction,
    benign_mean: &[f64],
    own_grad: &[f64],
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if benign_mean.len() != own_grad.len() {
        return Err(Error::Dimension {
            context: "attacker own gradient",
            expected: benign_mean.len(),
            actual: own_grad.len(),
        });
    }
    let dim = benign_mean.len();
    let mix = action.direction_mix;
    let mut out = match (unit(benign_mean), unit(own_grad)) {
        (Some(ub), own) => {
            let mut dir = scale(mix, &ub);
            if let Some(uo) = own {
                crate::linalg::axpy(1.0 - mix.abs(), &uo, &mut dir);
            }
            scale(action.boost * norm(benign_mean), &dir)
        }
        (None, Some(uo)) => scale(action.boost * norm(own_grad), &uo),
        (None, None) => vec![0.0; dim],
    };
    if action.noise_scale > 0.0 {
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += action.noise_scale * z;
        }
    }
    Ok(out)
}

/// Reads a trigger pattern stored as a JSON array of numbers.
pub fn load_trigger(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let v: Vec<f64> = serde_json::from_str(&text)?;
    crate::error::ensure_finite(&v, || format!("trigger {}", path.display()))?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cosine, dot};

    #[test]
    fn ipm_examples() {
        let benign = vec![vec![1.0, 2.0], vec![3.0, 0.0]];
        assert_eq!(ipm_update(&benign, 1.0).unwrap(), vec![-2.0, -1.0]);
        assert_eq!(ipm_update(&benign, 0.0).unwrap(), vec![-0.0, -0.0]);
        assert!((cosine(&ipm_update(&benign, 3.0).unwrap(), &[2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!(ipm_update(&[], 1.0).is_err());
    }

    #[test]
    fn ipm_flips_inner_product_past_threshold() {
        // n = 5 with M = 2 malicious: the sign flips at eps = n_benign / M = 1.5
        let benign = vec![vec![1.0, 0.5], vec![0.8, 0.7], vec![1.2, 0.3]];
        let mb = aggregate(&benign);
        for (eps, positive) in [(1.0, true), (1.4, true), (1.6, false), (10.0, false)] {
            let bad = ipm_update(&benign, eps).unwrap();
            let mut all = benign.clone();
            all.push(bad.clone());
            all.push(bad);
            assert_eq!(dot(&aggregate(&all), &mb) > 0.0, positive, "eps {eps}");
        }
    }

    fn aggregate(u: &[Vec<f64>]) -> Vec<f64> {
        defenses::aggregate_mean(u).unwrap()
    }

    #[test]
    fn lmp_mean_takes_first_lambda() {
        let r = lmp_update(&[vec![0.5]], LmpTarget::Mean, 1, &LmpConfig::default()).unwrap();
        assert_eq!(r.lambda, 10.0);
        assert_eq!(r.update, vec![-5.0]);
        let z = lmp_update(&[vec![0.0, 0.0]], LmpTarget::Median, 2, &LmpConfig::default()).unwrap();
        assert_eq!(z.update, vec![0.0, 0.0]);
    }

    #[test]
    fn lmp_rejects_fltrust() {
        assert!(LmpTarget::from_aggregator(AggregatorId::FlTrust, 0.0, 0).is_err());
    }

    #[test]
    fn eb_examples() {
        let g = vec![0.3, -4.0];
        assert_eq!(eb_update(&g, 0.0).unwrap(), vec![0.0, -0.0]);
        assert_eq!(eb_update(&g, 1.0).unwrap(), g);
        assert!((norm(&eb_update(&g, 2.5).unwrap()) - 2.5 * norm(&g)).abs() < 1e-12);
    }

    #[test]
    fn attack_action_special_cases() {
        let m = vec![0.5, -1.0, 2.0];
        let own = vec![1.0, 1.0, 0.0];
        let mut rng = SeedStream::root(0).rng();
        let anti = AttackAction {
            boost: 1.0,
            direction_mix: -1.0,
            noise_scale: 0.0,
        };
        let out = apply_attack_action(&anti, &m, &own, &mut rng).unwrap();
        for (a, b) in out.iter().zip(&m) {
            assert!((a + b).abs() < 1e-12);
        }
        let camo = AttackAction {
            direction_mix: 1.0,
            ..anti
        };
        let out = apply_attack_action(&camo, &m, &own, &mut rng).unwrap();
        for (a, b) in out.iter().zip(&m) {
            assert!((a - b).abs() < 1e-12);
        }
        let none = apply_attack_action(&anti, &[0.0; 3], &[0.0; 3], &mut rng).unwrap();
        assert_eq!(none, vec![0.0; 3]);
    }

    #[test]
    fn squash_respects_box() {
        let bx = AttackBox::default();
        for raw in [[-30.0; 3], [0.0; 3], [30.0; 3]] {
            bx.squash(&raw).unwrap().validate(bx.boost_cap).unwrap();
        }
    }
}
