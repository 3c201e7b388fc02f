//! Attacker types and the prior over them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackCategory {
    Untargeted,
    Backdoor,
    Mixed,
}

/// Stable identifiers of the non-adaptive rulebook attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleId {
    #[serde(rename = "ipm")]
    Ipm,
    #[serde(rename = "lmp")]
    Lmp,
    #[serde(rename = "eb")]
    Eb,
    #[serde(rename = "bfl_static")]
    BflStatic,
}

impl RuleId {
    pub const ALL: [RuleId; 4] = [RuleId::Ipm, RuleId::Lmp, RuleId::Eb, RuleId::BflStatic];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::Ipm => "ipm",
            RuleId::Lmp => "lmp",
            RuleId::Eb => "eb",
            RuleId::BflStatic => "bfl_static",
        }
    }

    pub fn parse(s: &str) -> Option<RuleId> {
        RuleId::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Rule(RuleId),
    Adaptive,
}

fn default_lambda() -> f64 {
    1.0
}

/// One hidden attacker type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTypeSpec {
    pub id: u32,
    pub category: AttackCategory,
    /// Number of backdoor clients.
    #[serde(default)]
    pub m1: usize,
    /// Number of untargeted-poisoning clients.
    #[serde(default)]
    pub m2: usize,
    pub behavior: Behavior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_label: Option<usize>,
    /// Main-task vs backdoor tradeoff of the backdoor objective.
    #[serde(default = "default_lambda")]
    pub lambda_mix: f64,
}

impl AttackTypeSpec {
    pub fn untargeted(id: u32, m2: usize, behavior: Behavior) -> Self {
        Self {
            id,
            category: AttackCategory::Untargeted,
            m1: 0,
            m2,
            behavior,
            trigger: None,
            target_label: None,
            lambda_mix: 1.0,
        }
    }

    pub fn backdoor(
        id: u32,
        m1: usize,
        behavior: Behavior,
        trigger: Vec<f64>,
        target_label: usize,
        lambda_mix: f64,
    ) -> Self {
        Self {
            id,
            category: AttackCategory::Backdoor,
            m1,
            m2: 0,
            behavior,
            trigger: Some(trigger),
            target_label: Some(target_label),
            lambda_mix,
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self.behavior, Behavior::Adaptive)
    }

    pub fn n_malicious(&self) -> usize {
        self.m1 + self.m2
    }

    /// Share of backdoor clients among all malicious clients, `m1 / (m1 + m2)`.
    pub fn rho(&self) -> Result<f64> {
        let total = self.m1 + self.m2;
        if total == 0 {
            return Err(Error::validation(format!(
                "type {}: rho undefined with m1 + m2 = 0",
                self.id
            )));
        }
        Ok(self.m1 as f64 / total as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.id;
        if self.m1 + self.m2 == 0 {
            return Err(Error::validation(format!(
                "type {id}: m1 + m2 must be at least 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return Err(Error::validation(format!(
                "type {id}: lambda_mix {} outside [0, 1]",
                self.lambda_mix
            )));
        }
        let wants_trigger = matches!(self.category, AttackCategory::Backdoor | AttackCategory::Mixed);
        if wants_trigger != (self.trigger.is_some() && self.target_label.is_some()) {
            return Err(Error::validation(format!(
                "type {id}: trigger and target_label must be present iff the category is backdoor or mixed"
            )));
        }
        if !wants_trigger && (self.trigger.is_some() || self.target_label.is_some()) {
            return Err(Error::validation(format!(
                "type {id}: untargeted types carry no trigger"
            )));
        }
        match self.category {
            AttackCategory::Untargeted if self.m1 != 0 => {
                return Err(Error::validation(format!(
                    "type {id}: untargeted types have m1 = 0"
                )))
            }
            AttackCategory::Backdoor if self.m2 != 0 => {
                return Err(Error::validation(format!(
                    "type {id}: backdoor types have m2 = 0"
                )))
            }
            AttackCategory::Mixed if self.m1 == 0 || self.m2 == 0 => {
                return Err(Error::validation(format!(
                    "type {id}: mixed types need m1 > 0 and m2 > 0"
                )))
            }
            _ => {}
        }
        if self.m2 > 0 && self.behavior == Behavior::Rule(RuleId::BflStatic) {
            return Err(Error::validation(format!(
                "type {id}: rule bfl_static drives backdoor clients only"
            )));
        }
        if let Some(t) = &self.trigger {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("trigger of type {id}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    #[serde(flatten)]
    pub spec: AttackTypeSpec,
    pub prob: f64,
}

/// Prior over attacker types.
///
/// Serialized as `{"types": [{"id": 0, "category": "untargeted", ..., "prob": 0.5}, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypePrior {
    pub types: Vec<PriorEntry>,
}

const PRIOR_SUM_TOL: f64 = 1e-12;

impl TypePrior {
    pub fn new(entries: Vec<(AttackTypeSpec, f64)>) -> Result<Self> {
        let prior = Self {
            types: entries
                .into_iter()
                .map(|(spec, prob)| PriorEntry { spec, prob })
                .collect(),
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn single(spec: AttackTypeSpec) -> Result<Self> {
        Self::new(vec![(spec, 1.0)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::Empty("type prior"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.types {
            e.spec.validate()?;
            if !seen.insert(e.spec.id) {
                return Err(Error::validation(format!("duplicate type id {}", e.spec.id)));
            }
            if !(0.0..=1.0).contains(&e.prob) {
                return Err(Error::validation(format!(
                    "type {}: probability {} outside [0, 1]",
                    e.spec.id, e.prob
                )));
            }
        }
        let sum: f64 = self.types.iter().map(|e| e.prob).sum();
        if (sum - 1.0).abs() > PRIOR_SUM_TOL {
            let shown = (sum * 1e9).round() / 1e9;
            return Err(Error::validation(format!("probabilities sum to {shown}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn specs(&self) -> impl Iterator<Item = &AttackTypeSpec> {
        self.types.iter().map(|e| &e.spec)
    }

    pub fn get(&self, id: u32) -> Option<&AttackTypeSpec> {
        self.specs().find(|s| s.id == id)
    }

    pub fn prob(&self, id: u32) -> Option<f64> {
        self.types.iter().find(|e| e.spec.id == id).map(|e| e.prob)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let prior: TypePrior = serde_json::from_str(text)?;
        prior.validate()?;
        Ok(prior)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Draws one type by inverting the cumulative distribution of the prior.
pub fn sample_type<'a>(prior: &'a TypePrior, rng: &mut StreamRng) -> Result<&'a AttackTypeSpec> {
    prior.validate()?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for e in &prior.types {
        acc += e.prob;
        if u < acc {
            return Ok(&e.spec);
        }
    }
    // u landed in the rounding gap above the last cumulative value
    Ok(&prior
        .types
        .iter()
        .rev()
        .find(|e| e.prob > 0.0)
        .expect("validated prior has positive mass")
        .spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn ipm(id: u32) -> AttackTypeSpec {
        AttackTypeSpec::untargeted(id, 4, Behavior::Rule(RuleId::Ipm))
    }

    #[test]
    fn degenerate_prior_always_returns_its_type() {
        let prior = TypePrior::single(ipm(3)).unwrap();
        let mut rng = SeedStream::root(1).rng();
        for _ in 0..100 {
            assert_eq!(sample_type(&prior, &mut rng).unwrap().id, 3);
        }
    }

    #[test]
    fn fair_coin_frequency() {
        let prior = TypePrior::new(vec![(ipm(0), 0.5), (ipm(1), 0.5)]).unwrap();
        let mut rng = SeedStream::root(11).derive("types").rng();
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_type(&prior, &mut rng).unwrap().id == 0)
            .count();
        let f = hits as f64 / n as f64;
        assert!((0.49..=0.51).contains(&f), "frequency {f}");
    }

    #[test]
    fn bad_sum_names_the_sum() {
        let err = TypePrior::new(vec![(ipm(0), 0.6), (ipm(1), 0.3)]).unwrap_err();
        assert!(err.to_string().contains("probabilities sum to 0.9"), "{err}");
    }

    #[test]
    fn rho_and_validation() {
        let mut t = AttackTypeSpec::backdoor(0, 2, Behavior::Adaptive, vec![0.5; 3], 1, 0.3);
        t.validate().unwrap();
        assert_eq!(t.rho().unwrap(), 1.0);
        t.category = AttackCategory::Mixed;
        t.m2 = 2;
        assert_eq!(t.rho().unwrap(), 0.5);
        t.lambda_mix = 1.5;
        assert!(t.validate().is_err());

        let mut u = ipm(1);
        u.trigger = Some(vec![1.0]);
        assert!(u.validate().is_err());
        let mut z = ipm(2);
        z.m2 = 0;
        assert!(z.validate().is_err());
        assert!(z.rho().is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(TypePrior::new(vec![(ipm(0), 0.5), (ipm(0), 0.5)]).is_err());
        assert!(TypePrior::new(vec![]).is_err());
    }

    #[test]
    fn prior_json_shape() {
        let prior = TypePrior::new(vec![
            (ipm(0), 0.5),
            (AttackTypeSpec::untargeted(1, 4, Behavior::Adaptive), 0.5),
        ])
        .unwrap();
        let text = prior.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["types"][0]["category"], "untargeted");
        assert_eq!(v["types"][0]["m2"], 4);
        assert_eq!(v["types"][0]["behavior"]["rule"], "ipm");
        assert_eq!(v["types"][1]["behavior"], "adaptive");
        assert_eq!(v["types"][1]["prob"], 0.5);
        assert_eq!(TypePrior::from_json(&text).unwrap(), prior);
    }
}
