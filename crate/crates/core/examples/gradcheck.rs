//! Estimator checks against exact enumeration on the two-state tabular MDP.
//!
//! `cargo run --release --example gradcheck -- 100000` runs the full-size
//! check; the default sample count is smaller.

fn main() -> metastack::Result<()> {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20_000);
    let report = metastack::diagnostics::grad_check_suite(0, n, n, n)?;
    print!("{}", report.to_table());
    println!(
        "{}",
        if report.passed() {
            "all checks passed"
        } else {
            "some checks FAILED"
        }
    );
    Ok(())
}
