//! `grpo-rank` command line: train, evaluate, print the penalty table,
//! check gradients and compare algorithms across seeds.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grpo_rank::gradcheck::{self, GradcheckConfig};
use grpo_rank::table::{penalty_table, render_table};
use grpo_rank::PenaltyMode;

use crate::run::{CliError, RunOptions};

#[derive(Parser)]
#[command(name = "grpo-rank", version, about = "Rank-based policy optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Force the canonical single-threaded execution mode.
    #[arg(long)]
    single_thread: bool,
    /// Replace the policy-init, sampling and oracle-noise seeds.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Use an external judge process speaking the NDJSON protocol. The
    /// value is split on whitespace into program and arguments.
    #[arg(long, value_name = "ARGV")]
    oracle_cmd: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, checkpoint and evaluation report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Evaluate a checkpoint against the configured task.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write eval_report.json here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Print the worked rank-advantage table for one displaced response.
    Table {
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        truth: usize,
        #[arg(long, default_value_t = PenaltyMode::TableConsistent)]
        mode: PenaltyMode,
    },
    /// Compare analytic objective gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 120)]
        instances: usize,
        #[arg(long, default_value_t = 5)]
        max_vocab: usize,
        #[arg(long, default_value_t = 2)]
        max_order: usize,
        #[arg(long, default_value_t = 4)]
        max_group: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Print the full per-instance report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run several configs over a shared seed set and write learning curves
    /// with mean and standard deviation across seeds.
    Compare {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        single_thread: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, flags } => run::train(
            &config,
            &out,
            &RunOptions {
                single_thread: flags.single_thread,
                seed_override: flags.seed_override,
                oracle_cmd: flags.oracle_cmd,
            },
        ),
        Command::Eval { config, checkpoint, out, seed_override } => {
            run::eval(&config, &checkpoint, out.as_deref(), seed_override)
        }
        Command::Table { k, truth, mode } => table(k, truth, mode),
        Command::Gradcheck { seed, instances, max_vocab, max_order, max_group, tolerance, json } => gradcheck(
            GradcheckConfig {
                seed,
                instances,
                max_vocab,
                max_order,
                max_group,
                ..GradcheckConfig::default()
            },
            tolerance,
            json,
        ),
        Command::Compare { configs, out, seeds, single_thread } => {
            run::compare(&configs, &out, &seeds, single_thread)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn table(k: usize, truth: usize, mode: PenaltyMode) -> Result<(), CliError> {
    let rows = penalty_table(k, truth, mode).map_err(|e| CliError::Config(e.to_string()))?;
    print!("{}", render_table(&rows));
    Ok(())
}

fn gradcheck(config: GradcheckConfig, tolerance: f64, json: bool) -> Result<(), CliError> {
    if config.max_vocab > 5 || config.max_order > 2 || config.max_group > 4 || config.instances == 0 {
        return Err(CliError::Config(
            "gradcheck sizes are capped at vocab 5, order 2, group 4 and need >= 1 instance".into(),
        ));
    }
    let report = gradcheck::run(&config, tolerance).map_err(|e| CliError::Config(e.to_string()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
    }
    let summary = format!(
        "gradcheck: {} instances, max relative error {:.3e} (value baseline {:.3e}), tolerance {:.0e}, {} redrawn near clip edges",
        report.instances.len(),
        report.max_rel_error,
        report.value_max_rel_error,
        tolerance,
        report.redrawn
    );
    // keep stdout pure JSON when a machine-readable report was requested
    if json {
        eprintln!("{summary}");
    } else {
        println!("{summary}");
    }
    if report.passed(tolerance) {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!("gradient check failed")))
    }
}
