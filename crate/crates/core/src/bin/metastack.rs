use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use metastack::harness::{
    cmd_adapt, cmd_diagnose, cmd_eval, cmd_pretrain, configure_workers, exit_code, AdaptArgs, Algo,
    DiagnoseArgs, EvalArgs, EvalDefense, PretrainArgs,
};

#[derive(Parser)]
#[command(
    name = "metastack",
    version,
    about = "Meta-Stackelberg defenses for federated learning"
)]
struct Cli {
    /// Rollout worker threads (falls back to METASTACK_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Do not echo the resolved configuration.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a defense meta-policy in simulation.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// meta-sl | meta-rl | bse
        #[arg(long, default_value = "meta-sl")]
        algo: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt a pre-trained defense online against one attack.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Type id from the prior, `benign`, or a type-spec JSON file.
        #[arg(long)]
        attack: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a defense over fresh episodes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        attack: String,
        #[arg(long, short = 'n', default_value_t = 20)]
        episodes: usize,
        /// policy | plain-mean
        #[arg(long, default_value = "policy")]
        defense: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run equilibrium and estimator diagnostics.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// fose | sc | pl | lipschitz | gradcheck | all
        #[arg(long)]
        check: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> metastack::Result<i32> {
    configure_workers(cli.workers)?;
    let quiet = cli.quiet;
    match cli.command {
        Command::Pretrain {
            config,
            out,
            algo,
            seed,
        } => {
            let s = cmd_pretrain(&PretrainArgs {
                config,
                out,
                algo: Algo::parse(&algo)?,
                seed,
                quiet,
            })?;
            println!(
                "pretrained {} iterations; checkpoint {}",
                s.iterations,
                s.final_checkpoint.display()
            );
        }
        Command::Adapt {
            config,
            checkpoint,
            attack,
            steps,
            out,
            seed,
        } => {
            let s = cmd_adapt(&AdaptArgs {
                config,
                checkpoint,
                attack,
                steps,
                out,
                seed,
                quiet,
            })?;
            for st in &s.steps {
                println!(
                    "step {:>3}  return {:.4}  clean_acc {:?}",
                    st.step, st.defender_return, st.clean_acc
                );
            }
            println!("adapted checkpoint {}", s.adapted_checkpoint.display());
        }
        Command::Eval {
            config,
            checkpoint,
            attack,
            episodes,
            defense,
            out,
            seed,
        } => {
            let defense = EvalDefense::parse(&defense)?;
            let r = cmd_eval(&EvalArgs {
                config,
                checkpoint,
                attack,
                episodes,
                defense,
                out,
                seed,
                quiet,
            })?;
            print!("{}", r.to_table());
        }
        Command::Diagnose {
            config,
            checkpoint,
            check,
            out,
            seed,
        } => {
            let r = cmd_diagnose(&DiagnoseArgs {
                config,
                checkpoint,
                check,
                out,
                seed,
                quiet,
            })?;
            print!("{}", r.to_table());
            if !r.failures.is_empty() {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("metastack failed") {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let code = e.downcast_ref::<metastack::Error>().map_or(1, exit_code);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
