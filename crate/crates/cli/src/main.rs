mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "larpg",
    version,
    about = "Collaborative bundle adjustment with lazy communication"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Set a dotted config key, e.g. `lazy.epsilon=0` (repeatable).
    #[arg(long = "override", value_name = "K=V", global = true)]
    overrides: Vec<String>,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, env = "LARPG_THREADS", global = true)]
    threads: Option<usize>,
    /// Seed for scene generation, partition and initial perturbation.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the solver and write the trace and metrics.
    Run,
    /// Run once per value of a parameter on a shared problem.
    Sweep {
        /// One of epsilon, dbar, delta_p, gamma.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "sweep")]
        out_dir: PathBuf,
    },
    /// Estimate sigma_p, build admissible parameters and verify Lyapunov descent.
    Check {
        /// Absolute stepsize, instead of `gamma_scale / sigma_p`.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        gamma_scale: f64,
        /// Absolute uniform epsilon, instead of `epsilon_scale (1 - sigma_p gamma) / dbar`.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        epsilon_scale: f64,
        /// Iterations of the verification run; defaults to solver.max_iters.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Write the synthetic problem as a BAL file plus ground truth.
    Gen {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Recompute metrics for a saved state.
    Metrics {
        #[arg(long)]
        state: PathBuf,
        /// Trace of the run, for the byte totals.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<bool> {
    let cli = Cli::parse();
    let c = &cli.common;
    let text = match &c.config {
        Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let cfg = config::load(text.as_deref(), c.seed, &c.overrides)?;
    let threads = c.threads.unwrap_or(0);
    match &cli.cmd {
        Cmd::Run => commands::cmd_run(&cfg, threads)?,
        Cmd::Sweep { param, values, out_dir } => commands::cmd_sweep(&cfg, threads, param, values, out_dir)?,
        Cmd::Check {
            gamma,
            gamma_scale,
            epsilon,
            epsilon_scale,
            iters,
        } => {
            let opts = commands::CheckOptions {
                gamma: *gamma,
                gamma_scale: *gamma_scale,
                epsilon: *epsilon,
                epsilon_scale: *epsilon_scale,
                iters: *iters,
            };
            return commands::cmd_check(&cfg, threads, &opts);
        }
        Cmd::Gen { out_dir } => {
            commands::cmd_gen(&cfg, out_dir)?;
        }
        Cmd::Metrics { state, trace } => {
            commands::cmd_metrics(&cfg, state, trace.as_deref())?;
        }
    }
    Ok(true)
}
