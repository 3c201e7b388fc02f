//! Gaussian-cluster classification tasks split across clients with
//! controllable label skew.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    /// Training samples per class, pooled over all clients.
    pub per_class: usize,
    pub cluster_spread: f64,
    /// Probability mass a sample puts on clients whose home label matches
    /// its own; `1/classes` gives an i.i.d. split.
    pub heterogeneity: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 10,
            classes: 3,
            per_class: 200,
            cluster_spread: 0.3,
            heterogeneity: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.classes < 2 || self.per_class < 1 {
            return Err(Error::validation(format!(
                "synthetic task needs dim >= 2, classes >= 2, per_class >= 1 (got {}, {}, {})",
                self.dim, self.classes, self.per_class
            )));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::validation(format!(
                "cluster_spread {} must be finite and >= 0",
                self.cluster_spread
            )));
        }
        let lo = 1.0 / self.classes as f64;
        if !(self.heterogeneity >= lo - 1e-12 && self.heterogeneity <= 1.0) {
            return Err(Error::validation(format!(
                "heterogeneity {} outside [1/C, 1] = [{lo}, 1]",
                self.heterogeneity
            )));
        }
        Ok(())
    }
}

/// Class-conditional Gaussians. With `classes <= dim` the means are
/// `e_c / sqrt(2)`, so every pair is exactly distance 1 apart; otherwise
/// they are random directions of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    pub means: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(spec: SyntheticSpec, stream: SeedStream) -> Result<Self> {
        spec.validate()?;
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let means = if spec.classes <= spec.dim {
            (0..spec.classes)
                .map(|c| {
                    let mut m = vec![0.0; spec.dim];
                    m[c] = r;
                    m
                })
                .collect()
        } else {
            let mut rng = stream.derive("means").rng();
            (0..spec.classes)
                .map(|_| {
                    let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = crate::linalg::norm(&v).max(1e-12);
                    v.iter().map(|x| x * r / n).collect()
                })
                .collect()
        };
        Ok(Self { spec, means })
    }

    fn draw(&self, class: usize, rng: &mut impl Rng) -> Vec<f64> {
        let s = self.spec.cluster_spread;
        self.means[class]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect()
    }

    /// `n` samples with labels cycling through the classes.
    pub fn balanced(&self, n: usize, stream: SeedStream) -> Result<Dataset> {
        let mut rng = stream.rng();
        let c = self.spec.classes;
        let y: Vec<usize> = (0..n).map(|i| i % c).collect();
        let x = y.iter().map(|&k| self.draw(k, &mut rng)).collect();
        Dataset::new(self.spec.dim, c, x, y)
    }

    /// Draws the pooled training set and deals each sample to a client.
    /// Client `k` has home label `k mod classes`.
    pub fn client_shards(&self, n_clients: usize, stream: SeedStream) -> Result<Vec<Dataset>> {
        if n_clients == 0 {
            return Err(Error::validation("need at least one client"));
        }
        let spec = &self.spec;
        let c = spec.classes;
        let q = spec.heterogeneity;
        let off = if c > 1 { (1.0 - q) / (c as f64 - 1.0) } else { 0.0 };
        let mut rng = stream.rng();
        let mut xs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_clients];
        let mut ys: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for class in 0..c {
            let weights: Vec<f64> = (0..n_clients)
                .map(|k| if k % c == class { q } else { off })
                .collect();
            let total: f64 = weights.iter().sum();
            for _ in 0..spec.per_class {
                let x = self.draw(class, &mut rng);
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = n_clients - 1;
                for (k, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                xs[pick].push(x);
                ys[pick].push(class);
            }
        }
        xs.into_iter()
            .zip(ys)
            .map(|(x, y)| Dataset::new_allow_empty(spec.dim, c, x, y))
            .collect()
    }
}

/// Client shards generated from a synthetic task.
pub fn make_synthetic_dataset(
    spec: &SyntheticSpec,
    n_clients: usize,
    stream: SeedStream,
) -> Result<Vec<Dataset>> {
    let task = SyntheticTask::new(spec.clone(), stream)?;
    task.client_shards(n_clients, stream.derive("clients"))
}
