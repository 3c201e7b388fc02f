//! Robust aggregation rules, the post-training defense, and the defense
//! pipeline configured by the defender's action.
//!
//! Pipeline order: norm clipping, per-update Gaussian noise, aggregation,
//! then coordinate clamping of the resulting global model.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine, norm};
use crate::rng::StreamRng;

/// Stable aggregator ids: `"mean"`, `"tmean"`, `"median"`, `"krum"`, `"fltrust"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregatorId {
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "tmean")]
    TrimmedMean,
    #[serde(rename = "median")]
    Median,
    #[serde(rename = "krum")]
    Krum,
    #[serde(rename = "fltrust")]
    FlTrust,
}

impl AggregatorId {
    pub const ALL: [AggregatorId; 5] = [
        AggregatorId::Mean,
        AggregatorId::TrimmedMean,
        AggregatorId::Median,
        AggregatorId::Krum,
        AggregatorId::FlTrust,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorId::Mean => "mean",
            AggregatorId::TrimmedMean => "tmean",
            AggregatorId::Median => "median",
            AggregatorId::Krum => "krum",
            AggregatorId::FlTrust => "fltrust",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

fn check_updates(updates: &[Vec<f64>]) -> Result<usize> {
    let first = updates.first().ok_or(Error::Empty("update list"))?;
    let dim = first.len();
    for u in updates {
        if u.len() != dim {
            return Err(Error::Dimension {
                context: "client update",
                expected: dim,
                actual: u.len(),
            });
        }
    }
    Ok(dim)
}

pub fn aggregate_mean(updates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = check_updates(updates)?;
    let mut out = vec![0.0; dim];
    for u in updates {
        for (o, v) in out.iter_mut().zip(u) {
            *o += v;
        }
    }
    let n = updates.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

fn sorted_column(updates: &[Vec<f64>], j: usize) -> Vec<f64> {
    let mut col: Vec<f64> = updates.iter().map(|u| u[j]).collect();
    col.sort_by(f64::total_cmp);
    col
}

/// Number of entries dropped from each end by the trimmed mean.
pub fn trim_count(n: usize, beta: f64) -> usize {
    (beta * n as f64).floor() as usize
}

/// Per coordinate, drops the `floor(beta * n)` largest and smallest entries
/// and averages the rest.
pub fn aggregate_trimmed_mean(updates: &[Vec<f64>], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..0.5).contains(&beta) {
        return Err(Error::validation(format!(
            "trim fraction {beta} outside [0, 0.5)"
        )));
    }
    let dim = check_updates(updates)?;
    let n = updates.len();
    let k = trim_count(n, beta);
    if n < 2 * k + 1 {
        return Err(Error::validation(format!(
            "trimming {k} per side leaves nothing of {n} updates"
        )));
    }
    Ok((0..dim)
        .map(|j| {
            let col = sorted_column(updates, j);
            let kept = &col[k..n - k];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect())
}

/// Coordinate-wise median; even counts average the two middle entries.
pub fn aggregate_median(updates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = check_updates(updates)?;
    let n = updates.len();
    Ok((0..dim)
        .map(|j| {
            let col = sorted_column(updates, j);
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Krum scores: for each update, the sum of squared distances to its
/// `n - f - 2` nearest other updates.
pub fn krum_scores(updates: &[Vec<f64>], f: usize) -> Result<Vec<f64>> {
    check_updates(updates)?;
    let n = updates.len();
    if n < 2 * f + 3 {
        return Err(Error::validation(format!(
            "krum requires n \u{2265} 2f+3 (n = {n}, f = {f})"
        )));
    }
    let m = n - f - 2;
    Ok((0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(&updates[i], &updates[j]))
                .collect();
            d.sort_by(f64::total_cmp);
            d[..m].iter().sum()
        })
        .collect())
}

/// Index of the update Krum selects; exact score ties go to the lowest index.
pub fn krum_select(updates: &[Vec<f64>], f: usize) -> Result<usize> {
    let scores = krum_scores(updates, f)?;
    Ok(scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, s)| if *s < scores[best] { i } else { best }))
}

pub fn krum(updates: &[Vec<f64>], f: usize) -> Result<Vec<f64>> {
    Ok(updates[krum_select(updates, f)?].clone())
}

/// Scales each update to norm at most `alpha`.
pub fn norm_clip(updates: &[Vec<f64>], alpha: f64) -> Result<Vec<Vec<f64>>> {
    if !(alpha > 0.0) {
        return Err(Error::validation(format!("norm bound {alpha} must be > 0")));
    }
    Ok(updates
        .iter()
        .map(|u| {
            let n = norm(u);
            if n <= alpha {
                u.clone()
            } else {
                let s = alpha / n;
                u.iter().map(|v| v * s).collect()
            }
        })
        .collect())
}

/// FLTrust: trust score `relu(cos(u, server))`, each update rescaled to the
/// server update's norm, output the trust-weighted average. Returns the
/// server update when every trust score is zero.
pub fn fltrust(updates: &[Vec<f64>], server_update: &[f64]) -> Result<Vec<f64>> {
    let dim = check_updates(updates)?;
    if server_update.len() != dim {
        return Err(Error::Dimension {
            context: "server update",
            expected: dim,
            actual: server_update.len(),
        });
    }
    let server_norm = norm(server_update);
    if server_norm == 0.0 {
        return Err(Error::validation("fltrust needs a nonzero server update"));
    }
    let mut out = vec![0.0; dim];
    let mut total = 0.0;
    for u in updates {
        let trust = cosine(u, server_update).max(0.0);
        let un = norm(u);
        if trust == 0.0 || un == 0.0 {
            continue;
        }
        let s = trust * server_norm / un;
        for (o, v) in out.iter_mut().zip(u) {
            *o += s * v;
        }
        total += trust;
    }
    if total == 0.0 {
        return Ok(server_update.to_vec());
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

/// Post-training defense: clamps every model coordinate to `[-eps, eps]`.
pub fn post_process(params: &[f64], eps_clip: f64) -> Result<Vec<f64>> {
    if !(eps_clip > 0.0) {
        return Err(Error::validation(format!("post clip {eps_clip} must be > 0")));
    }
    Ok(params.iter().map(|p| p.clamp(-eps_clip, eps_clip)).collect())
}

/// Concrete defense hyperparameters chosen by the defender for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseAction {
    /// Trimmed-mean fraction, in `[0, 0.5)`.
    pub trim_frac: f64,
    /// Per-update norm bound, `> 0`.
    pub norm_bound: f64,
    /// Std of Gaussian noise added to each clipped update, `>= 0`.
    pub noise_std: f64,
    /// Coordinate bound of the post-processed model, `> 0`.
    pub post_clip: f64,
}

impl DefenseAction {
    pub const DIM: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.trim_frac) {
            return Err(Error::validation(format!(
                "trim_frac {} outside [0, 0.5)",
                self.trim_frac
            )));
        }
        if !(self.norm_bound > 0.0) {
            return Err(Error::validation(format!(
                "norm_bound {} must be > 0",
                self.norm_bound
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::validation(format!(
                "noise_std {} must be >= 0",
                self.noise_std
            )));
        }
        if !(self.post_clip > 0.0) {
            return Err(Error::validation(format!(
                "post_clip {} must be > 0",
                self.post_clip
            )));
        }
        Ok(())
    }

    /// The action under which every stage is the identity (plain mean).
    pub fn passthrough() -> Self {
        Self {
            trim_frac: 0.0,
            norm_bound: f64::INFINITY,
            noise_std: 0.0,
            post_clip: f64::INFINITY,
        }
    }
}

/// Box from which squashed policy actions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseBox {
    pub trim_max: f64,
    pub norm_min: f64,
    pub norm_max: f64,
    pub noise_max: f64,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl Default for DefenseBox {
    fn default() -> Self {
        Self {
            trim_max: 0.45,
            norm_min: 0.05,
            norm_max: 5.0,
            noise_max: 0.05,
            clip_min: 0.5,
            clip_max: 10.0,
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl DefenseBox {
    /// Per-coordinate affine sigmoid from raw policy outputs into the box.
    pub fn squash(&self, raw: &[f64]) -> Result<DefenseAction> {
        if raw.len() != DefenseAction::DIM {
            return Err(Error::Dimension {
                context: "defense action",
                expected: DefenseAction::DIM,
                actual: raw.len(),
            });
        }
        let a = DefenseAction {
            trim_frac: self.trim_max * sigmoid(raw[0]),
            norm_bound: self.norm_min + (self.norm_max - self.norm_min) * sigmoid(raw[1]),
            noise_std: self.noise_max * sigmoid(raw[2]),
            post_clip: self.clip_min + (self.clip_max - self.clip_min) * sigmoid(raw[3]),
        };
        Ok(DefenseAction {
            trim_frac: a.trim_frac.min(0.5 - 1e-12),
            ..a
        })
    }
}

/// A configured round of server-side defense.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pipeline {
    pub action: DefenseAction,
    pub aggregator: AggregatorId,
    /// Assumed malicious count for Krum.
    pub krum_f: usize,
}

pub fn build_pipeline(action: DefenseAction, aggregator: AggregatorId, krum_f: usize) -> Result<Pipeline> {
    action.validate()?;
    Ok(Pipeline {
        action,
        aggregator,
        krum_f,
    })
}

impl Pipeline {
    /// Clipping, noise and aggregation; returns the aggregated update.
    pub fn aggregate(
        &self,
        updates: &[Vec<f64>],
        server_update: Option<&[f64]>,
        rng: &mut StreamRng,
    ) -> Result<Vec<f64>> {
        check_updates(updates)?;
        let mut work = if self.action.norm_bound.is_finite() {
            norm_clip(updates, self.action.norm_bound)?
        } else {
            updates.to_vec()
        };
        if self.action.noise_std > 0.0 {
            let noise =
                Normal::new(0.0, self.action.noise_std).map_err(|e| Error::validation(e.to_string()))?;
            for u in &mut work {
                for v in u.iter_mut() {
                    *v += noise.sample(rng);
                }
            }
        }
        match self.aggregator {
            AggregatorId::Mean => aggregate_mean(&work),
            AggregatorId::TrimmedMean => aggregate_trimmed_mean(&work, self.action.trim_frac),
            AggregatorId::Median => aggregate_median(&work),
            AggregatorId::Krum => krum(&work, self.krum_f),
            AggregatorId::FlTrust => {
                let s = server_update.ok_or_else(|| Error::validation("fltrust needs a server update"))?;
                fltrust(&work, s)
            }
        }
    }

    /// Post-training stage applied to the updated global model.
    pub fn post_process(&self, params: &[f64]) -> Result<Vec<f64>> {
        if self.action.post_clip.is_finite() {
            post_process(params, self.action.post_clip)
        } else {
            Ok(params.to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn mean_examples() {
        let v = vec![1.0, -2.0, 3.5];
        assert_eq!(aggregate_mean(std::slice::from_ref(&v)).unwrap(), v);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(aggregate_mean(&[v, neg]).unwrap(), vec![0.0; 3]);
        assert!(aggregate_mean(&[]).is_err());
    }

    #[test]
    fn trimmed_mean_examples() {
        let ups: Vec<Vec<f64>> = [-10.0, 0.0, 1.0, 2.0, 10.0].iter().map(|x| vec![*x]).collect();
        assert_eq!(aggregate_trimmed_mean(&ups, 0.2).unwrap(), vec![1.0]);
        assert_eq!(
            aggregate_trimmed_mean(&ups, 0.0).unwrap(),
            aggregate_mean(&ups).unwrap()
        );
        assert!(aggregate_trimmed_mean(&ups, 0.5).is_err());
        // beta = 0.4, n = 5: one per side
        assert_eq!(trim_count(5, 0.4), 2);
        assert_eq!(trim_count(5, 0.2), 1);
    }

    #[test]
    fn median_examples() {
        let v = vec![3.0, 4.0];
        assert_eq!(aggregate_median(std::slice::from_ref(&v)).unwrap(), v);
        let ups: Vec<Vec<f64>> = [1.0, 2.0, 100.0].iter().map(|x| vec![*x]).collect();
        assert_eq!(aggregate_median(&ups).unwrap(), vec![2.0]);
        let even: Vec<Vec<f64>> = [1.0, 2.0, 4.0, 100.0].iter().map(|x| vec![*x]).collect();
        assert_eq!(aggregate_median(&even).unwrap(), vec![3.0]);
    }

    #[test]
    fn krum_examples() {
        let v = vec![1.0, 1.0];
        let mut ups = vec![v.clone(); 3];
        ups.push(vec![50.0, -50.0]);
        let err = krum(&ups, 1).unwrap_err();
        assert!(err.to_string().contains("krum requires n \u{2265} 2f+3"));
        let mut ups = vec![v.clone(); 4];
        ups.push(vec![50.0, -50.0]);
        assert_eq!(krum(&ups, 1).unwrap(), v);
    }

    #[test]
    fn clip_examples() {
        let u = vec![3.0, 4.0];
        assert_eq!(norm_clip(std::slice::from_ref(&u), 5.0).unwrap()[0], u);
        let out = norm_clip(std::slice::from_ref(&u), 2.5).unwrap();
        assert!((norm(&out[0]) - 2.5).abs() < 1e-12);
        let twice = norm_clip(&out, 2.5).unwrap();
        assert_eq!(twice, out);
        assert!(norm_clip(&[u], 0.0).is_err());
    }

    #[test]
    fn fltrust_examples() {
        let s = vec![1.0, 2.0];
        assert_eq!(fltrust(&[s.clone(), s.clone()], &s).unwrap(), s);
        let anti = vec![-2.0, -4.0];
        let par = vec![0.5, 1.0];
        // antiparallel update gets zero weight; parallel one is rescaled to |s|
        let out = fltrust(&[anti.clone(), par], &s).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] - 2.0).abs() < 1e-12);
        assert_eq!(fltrust(&[anti], &s).unwrap(), s);
        assert!(fltrust(&[vec![1.0, 0.0]], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn post_process_examples() {
        assert_eq!(post_process(&[0.1, -0.2], 1.0).unwrap(), vec![0.1, -0.2]);
        assert_eq!(post_process(&[2.0, -2.0], 1.0).unwrap(), vec![1.0, -1.0]);
        let once = post_process(&[5.0, -0.3, 0.9], 0.5).unwrap();
        assert_eq!(post_process(&once, 0.5).unwrap(), once);
    }

    #[test]
    fn passthrough_pipeline_is_plain_mean() {
        let p = build_pipeline(DefenseAction::passthrough(), AggregatorId::TrimmedMean, 1).unwrap();
        let ups = vec![vec![1.0, 2.0], vec![3.0, -4.0], vec![100.0, 0.5]];
        let mut rng = SeedStream::root(0).rng();
        assert_eq!(
            p.aggregate(&ups, None, &mut rng).unwrap(),
            aggregate_mean(&ups).unwrap()
        );
        assert_eq!(p.post_process(&[1e9]).unwrap(), vec![1e9]);
    }

    #[test]
    fn noisy_pipeline_deterministic_under_seed() {
        let action = DefenseAction {
            trim_frac: 0.2,
            norm_bound: 1.0,
            noise_std: 0.1,
            post_clip: 3.0,
        };
        let p = build_pipeline(action, AggregatorId::TrimmedMean, 1).unwrap();
        let ups: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -(i as f64)]).collect();
        let a = p.aggregate(&ups, None, &mut SeedStream::root(5).rng()).unwrap();
        let b = p.aggregate(&ups, None, &mut SeedStream::root(5).rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn squash_lands_in_box() {
        let bx = DefenseBox::default();
        for raw in [[-50.0; 4], [0.0; 4], [50.0; 4]] {
            bx.squash(&raw).unwrap().validate().unwrap();
        }
        let out_of_box = DefenseAction {
            trim_frac: 0.6,
            ..DefenseAction::passthrough()
        };
        assert!(build_pipeline(out_of_box, AggregatorId::Mean, 0).is_err());
    }
}
