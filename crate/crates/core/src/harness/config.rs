//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::ResidualConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::game::{AttackTypeSpec, Behavior, RuleId, TypePrior};
use crate::meta::MetaConfig;

/// The prior, either inline (`[[prior.types]]` tables) or as a JSON file
/// (`prior.file`, relative to the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSource {
    File { file: PathBuf },
    Inline(TypePrior),
}

impl Default for PriorSource {
    /// One adaptive untargeted type and one IPM type, four malicious
    /// clients each, equally likely.
    fn default() -> Self {
        PriorSource::Inline(TypePrior {
            types: vec![
                crate::game::PriorEntry {
                    spec: AttackTypeSpec::untargeted(0, 4, Behavior::Adaptive),
                    prob: 0.5,
                },
                crate::game::PriorEntry {
                    spec: AttackTypeSpec::untargeted(1, 4, Behavior::Rule(RuleId::Ipm)),
                    prob: 0.5,
                },
            ],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckId {
    Fose,
    Sc,
    Pl,
    Lipschitz,
    Gradcheck,
    All,
}

impl CheckId {
    pub const NAMES: [&'static str; 6] = ["fose", "sc", "pl", "lipschitz", "gradcheck", "all"];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "fose" => Self::Fose,
            "sc" => Self::Sc,
            "pl" => Self::Pl,
            "lipschitz" => Self::Lipschitz,
            "gradcheck" => Self::Gradcheck,
            "all" => Self::All,
            other => {
                return Err(Error::Config(format!(
                    "unknown check {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn includes(self, other: CheckId) -> bool {
        self == other || self == CheckId::All
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    /// Checks run by `diagnose` when `--check` is not given.
    pub checks: Vec<CheckId>,
    /// Residual cadence during pretraining (iterations); `0` disables.
    pub cadence: usize,
    pub residual: ResidualConfig,
    pub sc_samples: usize,
    pub pl_probes: usize,
    pub pl_radius: f64,
    /// Best-response steps used to approximate the attacker maximizer.
    pub pl_best_response_steps: usize,
    pub lipschitz_pairs: usize,
    pub lipschitz_radius: f64,
    /// Rollouts per Monte-Carlo estimate inside the probes.
    pub probe_batch: usize,
    pub gradcheck_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            checks: vec![CheckId::Fose],
            cadence: 10,
            residual: ResidualConfig::default(),
            sc_samples: 1000,
            pl_probes: 16,
            pl_radius: 0.5,
            pl_best_response_steps: 50,
            lipschitz_pairs: 10,
            lipschitz_radius: 0.1,
            probe_batch: 32,
            gradcheck_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random stream of the run derives from it.
    #[serde(with = "crate::rng::seed_serde")]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Write `checkpoint_iter_NNNNN.json` every this many iterations; `0` disables.
    pub checkpoint_every: usize,
    /// Fill the `wallclock_s` column of metrics files. Off by default so
    /// that reruns produce byte-identical metrics.
    pub record_wallclock: bool,
    pub env: EnvConfig,
    pub prior: PriorSource,
    pub meta: MetaConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves it (see [`Self::resolve`]); relative
    /// paths inside it are taken relative to the file's directory.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        cfg.resolve(path.parent().unwrap_or(Path::new(".")))
    }

    /// Inlines the prior, makes file references absolute, copies the seed
    /// into the meta section and validates every section.
    pub fn resolve(mut self, base: &Path) -> Result<Self> {
        let abs = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        if let PriorSource::File { file } = &self.prior {
            let path = abs(file);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("cannot read prior {}: {e}", path.display())))?;
            self.prior = PriorSource::Inline(
                TypePrior::from_json(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", path.display(), detail(e))))?,
            );
        }
        if let crate::env::DatasetSource::Idx { images, labels, .. } = &mut self.env.dataset {
            *images = abs(images);
            *labels = abs(labels);
        }
        self.meta.seed = self.seed;
        self.env.validate().map_err(config_err)?;
        self.prior().validate().map_err(config_err)?;
        self.meta.validate().map_err(config_err)?;
        if self.diagnostics.residual.batch_size == 0 || self.diagnostics.residual.replicates == 0 {
            return Err(Error::Config(
                "diagnostics.residual needs batch_size and replicates >= 1".into(),
            ));
        }
        Ok(self)
    }

    /// The prior; only meaningful after [`Self::resolve`].
    pub fn prior(&self) -> &TypePrior {
        match &self.prior {
            PriorSource::Inline(p) => p,
            PriorSource::File { .. } => panic!("prior file not resolved; call RunConfig::resolve first"),
        }
    }

    /// Meta configuration with the diagnostics cadence applied.
    pub fn meta_config(&self) -> MetaConfig {
        let mut m = self.meta.clone();
        m.residual_every = self.diagnostics.cadence;
        m.residual = self.diagnostics.residual.clone();
        m
    }
}

fn detail(e: Error) -> String {
    match e {
        Error::Validation(m) | Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Config(m),
        other => other,
    }
}
