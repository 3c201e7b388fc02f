//! Command-line plumbing: run configuration, metrics files, checkpoints and
//! the `pretrain` / `adapt` / `eval` / `diagnose` commands.

mod commands;
mod config;
mod metrics;

pub use commands::{
    attacker_checkpoint_name, cmd_adapt, cmd_diagnose, cmd_eval, cmd_pretrain, diagnose, evaluate,
    resolve_attack, AdaptArgs, AdaptSummary, Algo, DiagnoseArgs, DiagnosticsReport, EvalArgs, EvalDefense,
    EvalReport, MeanSe, PretrainArgs, PretrainSummary, ScEntry, ADAPTED_CHECKPOINT, ADAPT_METRICS_FILE,
    DIAGNOSTICS_FILE, EVAL_FILE, FINAL_CHECKPOINT, METRICS_FILE, RESOLVED_CONFIG,
};
pub use config::{CheckId, DiagnosticsConfig, PriorSource, RunConfig};
pub use metrics::{MetricsRow, MetricsWriter, METRICS_HEADER};

use crate::error::{Error, Result};

/// Environment variable consulted when `--workers` is not given.
pub const WORKERS_ENV: &str = "METASTACK_WORKERS";

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numerical failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Validation(_) => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

/// Sizes the global rollout pool from `--workers`, then `METASTACK_WORKERS`,
/// then the machine's parallelism. Results do not depend on the count.
pub fn configure_workers(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{WORKERS_ENV}={v:?} is not a worker count")))?,
            Err(_) => 0,
        },
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if n > 0 {
        builder = builder.num_threads(n);
    }
    // a pool may already exist (tests, embedding programs); keep it
    let _ = builder.build_global();
    Ok(rayon::current_num_threads())
}
