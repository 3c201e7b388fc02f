//! Estimator-vs-enumeration checks on the tabular toy MDP.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::game::{GameSampler, Player, TrajectorySampler};
use crate::linalg::{cosine, mean_and_variance, norm, sub};
use crate::policy::{hessian_estimate, meta_gradient, pg_estimate, Baseline, GradientMode, PolicyParams};
use crate::rng::SeedStream;
use crate::toy::{Enumeration, TabularMdp};

/// Parameters at which the checks are run (softmax logits, row-major by state).
pub const CHECK_THETA: [f64; 4] = [0.3, -0.2, -0.5, 0.4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub passed: bool,
    /// Largest `|estimate - oracle| / se` over coordinates.
    pub max_z: f64,
    /// `|estimate - oracle| / |oracle|`.
    pub rel_err: f64,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>6} {:>8} {:>10} {:>9}\n",
            "check", "result", "max_z", "rel_err", "samples"
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{:<16} {:>6} {:>8.3} {:>10.3e} {:>9}\n",
                e.name,
                if e.passed { "pass" } else { "FAIL" },
                e.max_z,
                e.rel_err,
                e.samples
            ));
            if let Some(n) = &e.note {
                out.push_str(&format!("  {n}\n"));
            }
        }
        out
    }
}

fn policy(mdp: &TabularMdp) -> PolicyParams {
    PolicyParams::new(Player::Defender, mdp.arch(), CHECK_THETA.to_vec()).expect("toy arch has 4 params")
}

fn compare(name: &str, mean: &[f64], var: &[f64], n: usize, oracle: &[f64], k: f64) -> GradCheckEntry {
    let mut max_z: f64 = 0.0;
    let mut passed = true;
    for ((m, v), o) in mean.iter().zip(var).zip(oracle) {
        let se = (v / n as f64).sqrt();
        let dev = (m - o).abs();
        if dev > k * se {
            passed = false;
        }
        if se > 0.0 {
            max_z = max_z.max(dev / se);
        } else if dev > 0.0 {
            max_z = f64::INFINITY;
        }
    }
    let on = norm(oracle);
    GradCheckEntry {
        name: name.to_string(),
        passed,
        max_z,
        rel_err: if on > 0.0 {
            norm(&sub(mean, oracle)) / on
        } else {
            norm(mean)
        },
        samples: n,
        note: None,
    }
}

/// Batch mean of the policy-gradient estimator over `n` trajectories against
/// the exact gradient, per coordinate within 3 standard errors.
pub fn check_pg(n: usize, stream: SeedStream) -> Result<GradCheckEntry> {
    let mdp = TabularMdp::canonical();
    let theta = policy(&mdp);
    let batch = GameSampler::new(&mdp).sample(&theta, None, n, stream)?;
    let est = pg_estimate(&batch, &theta, Baseline::None)?;
    let exact = Enumeration::new(&mdp).gradient(&CHECK_THETA);
    Ok(compare(
        "policy_gradient",
        &est.vector,
        &est.variance,
        n,
        &exact,
        3.0,
    ))
}

/// Mean of `n` single-trajectory Hessian estimates against central finite
/// differences (step `1e-4`) of the exact gradient, entrywise within 3 SE;
/// the mean's asymmetry must also be within 3 SE of zero.
pub fn check_hessian(n: usize, stream: SeedStream) -> Result<GradCheckEntry> {
    let mdp = TabularMdp::canonical();
    let theta = policy(&mdp);
    let batch = GameSampler::new(&mdp).sample(&theta, None, n, stream)?;
    let p = CHECK_THETA.len();
    let per: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|t| {
            Ok(hessian_estimate(std::slice::from_ref(t), &theta)?
                .as_slice()
                .to_vec())
        })
        .collect::<Result<_>>()?;
    let (mean, var) = mean_and_variance(&per, p * p);
    let fd = Enumeration::new(&mdp).hessian_fd(&CHECK_THETA, 1e-4);
    // column-major storage: entry (i, j) at j * p + i
    let oracle: Vec<f64> = (0..p * p).map(|k| fd[k % p][k / p]).collect();
    let mut entry = compare("hessian", &mean, &var, n, &oracle, 3.0);

    let asym: Vec<Vec<f64>> = per
        .iter()
        .map(|h| (0..p * p).map(|k| h[k] - h[(k % p) * p + k / p]).collect())
        .collect();
    let (am, av) = mean_and_variance(&asym, p * p);
    let sym = compare("symmetry", &am, &av, n, &vec![0.0; p * p], 3.0);
    entry.passed &= sym.passed;
    entry.note = Some(format!(
        "asymmetry max_z {:.3}",
        if sym.max_z.is_finite() { sym.max_z } else { 0.0 }
    ));
    Ok(entry)
}

/// Full-mode meta-gradient with one trajectory per round, averaged over
/// `reps` independent draws, against central differences (step `1e-5`) of
/// the enumerated adapted objective with step `eta`. Reptile-mode's mean
/// must have positive cosine with the same target.
pub fn check_meta_gradient(reps: usize, eta: f64, stream: SeedStream) -> Result<GradCheckEntry> {
    let mdp = TabularMdp::canonical();
    let theta = policy(&mdp);
    let sampler = GameSampler::new(&mdp);
    let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let s = stream.index(r);
            let full = meta_gradient(
                &theta,
                None,
                eta,
                GradientMode::Full,
                1,
                Baseline::None,
                &sampler,
                s,
            )?;
            let rep = meta_gradient(
                &theta,
                None,
                eta,
                GradientMode::Reptile,
                1,
                Baseline::None,
                &sampler,
                s,
            )?;
            Ok((full.vector, rep.vector))
        })
        .collect::<Result<_>>()?;
    let full: Vec<Vec<f64>> = draws.iter().map(|d| d.0.clone()).collect();
    let rep: Vec<Vec<f64>> = draws.iter().map(|d| d.1.clone()).collect();
    let p = CHECK_THETA.len();
    let (mean, var) = mean_and_variance(&full, p);
    let (rmean, _) = mean_and_variance(&rep, p);
    let oracle = Enumeration::new(&mdp).adapted_gradient_fd(&CHECK_THETA, eta, 1e-5);
    let mut entry = compare("meta_gradient", &mean, &var, reps, &oracle, 3.0);
    let cos = cosine(&rmean, &oracle);
    entry.passed &= cos > 0.0;
    entry.note = Some(format!("reptile cosine {cos:.4}"));
    Ok(entry)
}

/// All three checks with sample sizes `n_pg`, `n_hessian`, `n_meta`, keyed
/// off `seed`.
pub fn grad_check_suite(seed: u64, n_pg: usize, n_hessian: usize, n_meta: usize) -> Result<GradCheckReport> {
    let root = SeedStream::root(seed).derive("gradcheck");
    Ok(GradCheckReport {
        seed,
        entries: vec![
            check_pg(n_pg, root.derive("pg"))?,
            check_hessian(n_hessian, root.derive("hessian"))?,
            check_meta_gradient(n_meta, 1.0, root.derive("meta"))?,
        ],
    })
}
