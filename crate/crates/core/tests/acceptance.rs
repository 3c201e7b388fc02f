//! Acceptance run: prints one `criterion N: PASS|FAIL` line per criterion
//! and exits non-zero if any fails.
//!
//! Criteria 5 and 7 share the trained defenses: one pretraining run per
//! seed on the FL game, then residual and accuracy comparisons.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use metastack::defenses::{aggregate_median, aggregate_trimmed_mean, krum, trim_count};
use metastack::diagnostics::{check_hessian, check_meta_gradient, check_pg, sc_check};
use metastack::env::{EnvConfig, FlFamily};
use metastack::game::{AttackTypeSpec, Behavior, GameFamily, RuleId, TypePrior};
use metastack::harness::{
    cmd_pretrain, evaluate, Algo, EvalDefense, PretrainArgs, RunConfig, FINAL_CHECKPOINT, METRICS_FILE,
};
use metastack::meta::{bse_baseline, meta_sl, online_adapt, MetaConfig, MetaState};
use metastack::policy::{Baseline, PolicyParams};
use metastack::rng::SeedStream;
use metastack::toy::BanditFamily;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn criterion_1() -> metastack::Result<Outcome> {
    let t = Instant::now();
    let e = check_pg(100_000, SeedStream::root(1).derive("acceptance"))?;
    let dt = t.elapsed();
    Ok(outcome(
        e.passed && within(dt, 60),
        format!(
            "policy gradient max |z| = {:.2} over {} samples, {:.1}s",
            e.max_z,
            e.samples,
            dt.as_secs_f64()
        ),
    ))
}

fn criterion_2() -> metastack::Result<Outcome> {
    let t = Instant::now();
    let e = check_hessian(100_000, SeedStream::root(2).derive("acceptance"))?;
    let dt = t.elapsed();
    Ok(outcome(
        e.passed && within(dt, 300),
        format!(
            "hessian max |z| = {:.2}, {} ({:.1}s)",
            e.max_z,
            e.note.unwrap_or_default(),
            dt.as_secs_f64()
        ),
    ))
}

fn criterion_3() -> metastack::Result<Outcome> {
    let t = Instant::now();
    let e = check_meta_gradient(100_000, 1.0, SeedStream::root(3).derive("acceptance"))?;
    let dt = t.elapsed();
    Ok(outcome(
        e.passed && within(dt, 300),
        format!(
            "full-mode max |z| = {:.2}, {} ({:.1}s)",
            e.max_z,
            e.note.unwrap_or_default(),
            dt.as_secs_f64()
        ),
    ))
}

fn fl_prior() -> TypePrior {
    TypePrior::new(vec![
        (AttackTypeSpec::untargeted(0, 4, Behavior::Adaptive), 0.5),
        (AttackTypeSpec::untargeted(1, 4, Behavior::Rule(RuleId::Ipm)), 0.5),
    ])
    .expect("valid prior")
}

fn criterion_4() -> metastack::Result<Outcome> {
    let t = Instant::now();
    let family = FlFamily::new(EnvConfig::default(), SeedStream::root(4).derive("env"))?;
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let mut ok = true;
    for ty in fl_prior().specs() {
        let fit = sc_check(
            &family.instantiate(ty)?,
            1000,
            SeedStream::root(4).derive("sc").index(ty.id as u64),
        )?;
        ok &= (fit.c + 1.0).abs() <= 1e-10 && fit.d.abs() <= 1e-10 && fit.max_abs_residual <= 1e-10;
        worst = (
            worst.0.max((fit.c + 1.0).abs()),
            worst.1.max(fit.d.abs()),
            worst.2.max(fit.max_abs_residual),
        );
    }
    let dt = t.elapsed();
    Ok(outcome(
        ok && within(dt, 30),
        format!(
            "|c + 1| <= {:.1e}, |d| <= {:.1e}, max residual {:.1e} over 1000 tuples per type ({:.1}s)",
            worst.0,
            worst.1,
            worst.2,
            dt.as_secs_f64()
        ),
    ))
}

const FL_CONFIG: &str = r#"
[meta]
iterations = 150
hidden = 8
eta = 0.01
kappa_d = 0.01
kappa_a = 0.01

[diagnostics]
cadence = 10

[diagnostics.residual]
batch_size = 32
replicates = 8

[[prior.types]]
id = 0
category = "untargeted"
m2 = 4
behavior = "adaptive"
prob = 0.5

[[prior.types]]
id = 1
category = "untargeted"
m2 = 4
behavior = { rule = "ipm" }
prob = 0.5
"#;

struct FlRun {
    first_residual: f64,
    final_residual: f64,
    theta: PolicyParams,
    cfg: RunConfig,
    dir: std::path::PathBuf,
}

fn train_fl(seed: u64, root: &Path) -> metastack::Result<FlRun> {
    let config = root.join("fl.toml");
    std::fs::write(&config, FL_CONFIG)?;
    let dir = root.join(format!("seed{seed}"));
    let summary = cmd_pretrain(&PretrainArgs {
        config: config.clone(),
        out: Some(dir.clone()),
        algo: Algo::MetaSl,
        seed: Some(seed),
        quiet: true,
    })?;
    let hist = &summary.residual_history;
    let first = hist.iter().find(|r| r.iteration == 1);
    let last = hist.iter().find(|r| r.iteration == summary.iterations);
    let (first, last) = match (first, last) {
        (Some(a), Some(b)) => (a.defender_residual, b.defender_residual),
        _ => {
            return Err(metastack::Error::Validation(
                "residual not recorded at the first and last iteration".into(),
            ))
        }
    };
    Ok(FlRun {
        first_residual: first,
        final_residual: last,
        theta: PolicyParams::load(&summary.final_checkpoint)?,
        cfg: RunConfig::load(&config, Some(seed))?,
        dir,
    })
}

fn criterion_5(runs: &[FlRun], train_time: Duration) -> Outcome {
    let ratios: Vec<f64> = runs.iter().map(|r| r.final_residual / r.first_residual).collect();
    let m = median(ratios.clone());
    let shown: Vec<String> = runs
        .iter()
        .zip(&ratios)
        .map(|(r, q)| format!("{:.3}->{:.3} ({q:.2})", r.first_residual, r.final_residual))
        .collect();
    outcome(
        m <= 0.5 && within(train_time, 1800),
        format!(
            "median final/first residual {m:.3} [{}], training {:.0}s",
            shown.join(", "),
            train_time.as_secs_f64()
        ),
    )
}

fn criterion_6() -> metastack::Result<Outcome> {
    let t = Instant::now();
    let family = BanditFamily {
        targets: vec![(0, 1.0), (1, -1.0)],
    };
    let ty = |id| AttackTypeSpec::untargeted(id, 1, Behavior::Rule(RuleId::Ipm));
    let prior = TypePrior::new(vec![(ty(0), 0.5), (ty(1), 0.5)])?;
    let mut wins = 0;
    let mut shown = Vec::new();
    for seed in SEEDS {
        let cfg = MetaConfig {
            iterations: 300,
            batch_size: 16,
            hidden: 8,
            eta: 0.05,
            kappa_d: 0.05,
            seed,
            ..Default::default()
        };
        let init = MetaState::init(&cfg, &prior, &family)?;
        let meta = meta_sl(&cfg, &prior, &family, init.clone(), None)?.theta;
        let bse = bse_baseline(&cfg, &prior, &family, init, None)?.theta;
        let stream = SeedStream::root(seed).derive("adaptation-advantage");
        let (mut adapted, mut fixed) = (0.0, 0.0);
        for spec in prior.specs() {
            let q = prior.prob(spec.id).unwrap_or(0.0);
            let game = family.instantiate(spec)?;
            let reps = 50;
            for k in 0..reps {
                let s = stream.index(spec.id as u64).index(k);
                let (theta, _) = online_adapt(
                    &meta,
                    &game,
                    None,
                    1,
                    cfg.eta,
                    cfg.batch_size,
                    Baseline::MeanReturn,
                    s,
                )?;
                adapted += q * game.expected_return(&theta) / reps as f64;
            }
            fixed += q * game.expected_return(&bse);
        }
        if adapted >= fixed {
            wins += 1;
        }
        shown.push(format!("{adapted:.3} vs {fixed:.3}"));
    }
    let dt = t.elapsed();
    Ok(outcome(
        wins >= 4 && within(dt, 2700),
        format!(
            "adapted meta-SL >= BSE in {wins}/5 seeds [{}] ({:.1}s)",
            shown.join(", "),
            dt.as_secs_f64()
        ),
    ))
}

fn criterion_7(runs: &[FlRun], train_time: Duration) -> metastack::Result<Outcome> {
    let t = Instant::now();
    let mut gaps = Vec::new();
    let mut shown = Vec::new();
    for r in runs {
        let policy = evaluate(&r.cfg, Some(&r.theta), "1", 20, EvalDefense::Policy, Some(&r.dir))?;
        let plain = evaluate(&r.cfg, None, "1", 20, EvalDefense::PlainMean, None)?;
        gaps.push(policy.clean_acc.mean - plain.clean_acc.mean);
        shown.push(format!(
            "{:.3} vs {:.3}",
            policy.clean_acc.mean, plain.clean_acc.mean
        ));
    }
    let m = median(gaps);
    let total = t.elapsed() + train_time;
    Ok(outcome(
        m >= 0.10 && within(total, 1800),
        format!(
            "median accuracy gain {:.1} pp under IPM with 4/20 malicious [{}] ({:.0}s incl. training)",
            100.0 * m,
            shown.join(", "),
            total.as_secs_f64()
        ),
    ))
}

fn brute_krum(updates: &[Vec<f64>], f: usize) -> Vec<f64> {
    // score by minimizing over every subset of n - f - 2 neighbours
    let n = updates.len();
    let m = n - f - 2;
    let mut best = (f64::INFINITY, 0);
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let mut score = f64::INFINITY;
        for mask in 0u32..(1 << others.len()) {
            if mask.count_ones() as usize != m {
                continue;
            }
            let s: f64 = (0..others.len())
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| {
                    updates[i]
                        .iter()
                        .zip(&updates[others[b]])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                })
                .sum();
            score = score.min(s);
        }
        if score < best.0 {
            best = (score, i);
        }
    }
    updates[best.1].clone()
}

fn brute_median(updates: &[Vec<f64>]) -> Vec<f64> {
    // rank counting: the value with at most n/2 entries strictly on either side
    let n = updates.len();
    let dim = updates[0].len();
    let order_stat = |col: &[f64], r: usize| -> f64 {
        *col.iter()
            .find(|&&x| {
                let below = col.iter().filter(|&&y| y < x).count();
                let at_most = col.iter().filter(|&&y| y <= x).count();
                below <= r && r < at_most
            })
            .expect("every rank is attained")
    };
    (0..dim)
        .map(|j| {
            let col: Vec<f64> = updates.iter().map(|u| u[j]).collect();
            if n % 2 == 1 {
                order_stat(&col, n / 2)
            } else {
                0.5 * (order_stat(&col, n / 2 - 1) + order_stat(&col, n / 2))
            }
        })
        .collect()
}

fn brute_trimmed_mean(updates: &[Vec<f64>], beta: f64) -> Vec<f64> {
    // repeatedly strike the current maximum and minimum
    let k = (beta * updates.len() as f64).floor() as usize;
    (0..updates[0].len())
        .map(|j| {
            let mut col: Vec<f64> = updates.iter().map(|u| u[j]).collect();
            for _ in 0..k {
                let hi = (0..col.len()).fold(0, |b, i| if col[i] > col[b] { i } else { b });
                col.remove(hi);
                let lo = (0..col.len()).fold(0, |b, i| if col[i] < col[b] { i } else { b });
                col.remove(lo);
            }
            col.iter().sum::<f64>() / col.len() as f64
        })
        .collect()
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs())))
}

fn criterion_8() -> metastack::Result<Outcome> {
    let t = Instant::now();
    let stream = SeedStream::root(8).derive("aggregators");
    let mut mismatches = [0usize; 3];
    for i in 0..200u64 {
        let mut rng = stream.index(i).rng();
        let n = rng.random_range(5..=9usize);
        let dim = rng.random_range(1..=4usize);
        // every other instance uses small integers, so exact ties occur
        let integer = i % 2 == 0;
        let updates: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if integer {
                            (2.0 * z).round()
                        } else {
                            z
                        }
                    })
                    .collect()
            })
            .collect();
        let f = rng.random_range(0..=(n - 3) / 2);
        let beta = rng.random_range(0.0..0.45);
        if krum(&updates, f)? != brute_krum(&updates, f) {
            mismatches[0] += 1;
        }
        if !close(&aggregate_median(&updates)?, &brute_median(&updates)) {
            mismatches[1] += 1;
        }
        if trim_count(n, beta) * 2 < n
            && !close(
                &aggregate_trimmed_mean(&updates, beta)?,
                &brute_trimmed_mean(&updates, beta),
            )
        {
            mismatches[2] += 1;
        }
    }

    // one outlier of norm 1e6 among honest updates near (1, 1, 1)
    let mut rng = stream.derive("outlier").rng();
    let mut updates: Vec<Vec<f64>> = (0..9)
        .map(|_| {
            (0..3)
                .map(|_| 1.0 + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        })
        .collect();
    updates.push(vec![1e6 / 3f64.sqrt(); 3]);
    let dist = |v: &[f64]| v.iter().map(|x| (x - 1.0).powi(2)).sum::<f64>().sqrt();
    let robust = [
        dist(&krum(&updates, 1)?),
        dist(&aggregate_median(&updates)?),
        dist(&aggregate_trimmed_mean(&updates, 0.1)?),
    ];
    let mean_shift = dist(&metastack::defenses::aggregate_mean(&updates)?);
    let breakdown_ok = robust.iter().all(|d| *d < 1.0) && mean_shift > 1e4;
    let dt = t.elapsed();
    Ok(outcome(
        mismatches == [0, 0, 0] && breakdown_ok && within(dt, 10),
        format!(
            "mismatches krum/median/tmean {mismatches:?} over 200 instances; with a 1e6 outlier \
             robust rules stay within {:.3} of the honest center while the mean moves {:.1e} ({:.2}s)",
            robust.iter().cloned().fold(0.0, f64::max),
            mean_shift,
            dt.as_secs_f64()
        ),
    ))
}

fn criterion_9(root: &Path) -> metastack::Result<Outcome> {
    let t = Instant::now();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml");
    let run = |name: &str| {
        cmd_pretrain(&PretrainArgs {
            config: config.clone(),
            out: Some(root.join(name)),
            algo: Algo::MetaSl,
            seed: None,
            quiet: true,
        })
    };
    run("a")?;
    run("b")?;
    let mut same = Vec::new();
    for f in [METRICS_FILE, FINAL_CHECKPOINT, "attacker_0.json"] {
        same.push((
            f,
            std::fs::read(root.join("a").join(f))? == std::fs::read(root.join("b").join(f))?,
        ));
    }
    let ok = same.iter().all(|(_, s)| *s);
    Ok(outcome(
        ok,
        format!(
            "{} ({:.1}s)",
            same.iter()
                .map(|(f, s)| format!("{f} {}", if *s { "identical" } else { "DIFFERS" }))
                .collect::<Vec<_>>()
                .join(", "),
            t.elapsed().as_secs_f64()
        ),
    ))
}

fn report(n: usize, result: metastack::Result<Outcome>) -> bool {
    let (passed, detail) = match result {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {n}: {} {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut all = true;
    all &= report(1, criterion_1());
    all &= report(2, criterion_2());
    all &= report(3, criterion_3());
    all &= report(4, criterion_4());

    let t = Instant::now();
    let runs: metastack::Result<Vec<FlRun>> = SEEDS.iter().map(|&s| train_fl(s, tmp.path())).collect();
    let train_time = t.elapsed();
    match runs {
        Ok(runs) => {
            all &= report(5, Ok(criterion_5(&runs, train_time)));
            all &= report(6, criterion_6());
            all &= report(7, criterion_7(&runs, train_time));
        }
        Err(e) => {
            all &= report(
                5,
                Err(metastack::Error::Validation(format!("training failed: {e}"))),
            );
            all &= report(6, criterion_6());
            all &= report(
                7,
                Err(metastack::Error::Validation(format!("training failed: {e}"))),
            );
        }
    }
    all &= report(8, criterion_8());
    all &= report(9, criterion_9(&tmp.path().join("repro")));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
