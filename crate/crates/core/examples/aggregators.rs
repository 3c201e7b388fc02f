//! Robust aggregation rules on nine honest updates plus one huge outlier.
//!
//! Run with `cargo run --example aggregators`.

use metastack::defenses::{
    aggregate_mean, aggregate_median, aggregate_trimmed_mean, fltrust, krum, krum_select, norm_clip,
};
use metastack::rng::SeedStream;
use rand_distr::{Distribution, Normal};

fn main() -> metastack::Result<()> {
    let mut rng = SeedStream::root(42).rng();
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let mut updates: Vec<Vec<f64>> = (0..9)
        .map(|_| (0..3).map(|_| 1.0 + noise.sample(&mut rng)).collect())
        .collect();
    updates.push(vec![1e6, -1e6, 1e6]);

    let show =
        |name: &str, v: &[f64]| println!("{name:<14} [{:>12.4}, {:>12.4}, {:>12.4}]", v[0], v[1], v[2]);
    show("mean", &aggregate_mean(&updates)?);
    show("median", &aggregate_median(&updates)?);
    show("trimmed 0.1", &aggregate_trimmed_mean(&updates, 0.1)?);
    show("krum f=1", &krum(&updates, 1)?);
    println!("krum picked client {}", krum_select(&updates, 1)?);
    show("clip+mean", &aggregate_mean(&norm_clip(&updates, 2.0)?)?);
    show("fltrust", &fltrust(&updates, &[1.0, 1.0, 1.0])?);
    Ok(())
}
