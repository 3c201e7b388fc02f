//! The rulebook poisoning attacks against a set of benign updates.

use metastack::attacks::{eb_update, ipm_update, lmp_update, LmpConfig, LmpTarget};
use metastack::defenses::aggregate_trimmed_mean;
use metastack::linalg::cosine;

fn main() -> metastack::Result<()> {
    let benign = vec![
        vec![0.9, 0.2, -0.1],
        vec![1.1, 0.1, 0.0],
        vec![1.0, 0.3, -0.2],
        vec![0.8, 0.2, 0.1],
        vec![1.2, 0.0, -0.1],
        vec![1.0, 0.2, 0.0],
    ];
    let mean: Vec<f64> = (0..3)
        .map(|j| benign.iter().map(|u| u[j]).sum::<f64>() / 6.0)
        .collect();

    let ipm = ipm_update(&benign, 10.0)?;
    println!("ipm  {ipm:.3?}  cos to benign mean {:.3}", cosine(&ipm, &mean));

    for target in [
        LmpTarget::Mean,
        LmpTarget::TrimmedMean { beta: 0.2 },
        LmpTarget::Median,
        LmpTarget::Krum { f: 2 },
    ] {
        let r = lmp_update(&benign, target, 2, &LmpConfig::default())?;
        println!(
            "lmp vs {target:?}: lambda {:.3e} accepted {}",
            r.lambda, r.accepted
        );
    }

    let eb = eb_update(&mean.iter().map(|v| -v).collect::<Vec<_>>(), 5.0)?;
    println!("eb   {eb:.3?}");

    let mut poisoned = benign.clone();
    poisoned.extend([ipm.clone(), ipm]);
    println!(
        "trimmed mean with two IPM clients: {:.3?}",
        aggregate_trimmed_mean(&poisoned, 0.2)?
    );
    Ok(())
}
