use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use joulemodel::commands;
use joulemodel::config::{RunConfig, RunOptions};

#[derive(Parser)]
#[command(name = "joulemodel", version, about = "Layer-wise training-energy profiling and estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Profile every layer key of a model and fit its energy surfaces
    Profile {
        #[arg(long)]
        model: PathBuf,
        /// Merge into an existing profile database in the output directory
        #[arg(long)]
        append: bool,
        #[command(flatten)]
        opts: RunOptions,
    },
    /// Estimate a model's energy from fitted surfaces
    Estimate {
        #[arg(long)]
        model: PathBuf,
        /// Surfaces directory, or a profiling output directory (default: --out)
        #[arg(long)]
        surfaces: Option<PathBuf>,
        #[command(flatten)]
        opts: RunOptions,
    },
    /// Compare surface and FLOPs estimates on sampled architectures
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Profiling output directory (default: --out)
        #[arg(long)]
        surfaces: Option<PathBuf>,
        #[command(flatten)]
        opts: RunOptions,
    },
    /// Prune channels until the estimate meets an energy budget
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        surfaces: Option<PathBuf>,
        #[command(flatten)]
        opts: RunOptions,
    },
    /// Integrate a `t_s,p_w` power trace into joules per iteration
    Integrate {
        #[arg(long)]
        trace: PathBuf,
        /// Idle power in watts (default: trace_standby_w from the config)
        #[arg(long)]
        standby: Option<f64>,
        /// Iterations the trace covers (default: trace_iterations from the config)
        #[arg(long)]
        iterations: Option<u64>,
        #[command(flatten)]
        opts: RunOptions,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut stdout = std::io::stdout().lock();
    match cli.cmd {
        Cmd::Profile { model, append, opts } => {
            let cfg = RunConfig::resolve(opts)?;
            commands::profile(&model, &cfg, append, &mut stdout)?;
        }
        Cmd::Estimate { model, surfaces, opts } => {
            let cfg = RunConfig::resolve(opts)?;
            let dir = surfaces.unwrap_or_else(|| cfg.out.clone());
            if !commands::estimate(&model, &dir, &cfg, &mut stdout)? {
                eprintln!("estimate incomplete: some blocks have no usable surface");
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Evaluate { model, surfaces, opts } => {
            let cfg = RunConfig::resolve(opts)?;
            let dir = surfaces.unwrap_or_else(|| cfg.out.clone());
            commands::evaluate(&model, &dir, &cfg, &mut stdout)?;
        }
        Cmd::Prune { model, surfaces, opts } => {
            let cfg = RunConfig::resolve(opts)?;
            let dir = surfaces.unwrap_or_else(|| cfg.out.clone());
            commands::prune(&model, &dir, &cfg, &mut stdout)?;
        }
        Cmd::Integrate { trace, standby, iterations, opts } => {
            let cfg = RunConfig::resolve(opts)?;
            let standby = standby
                .or(cfg.trace.map(|t| t.standby_power))
                .context("--standby is required")?;
            let iterations = iterations
                .or(cfg.trace.map(|t| t.iterations))
                .context("--iterations is required")?;
            commands::integrate(&trace, standby, iterations, &mut stdout)?;
        }
    }
    stdout.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
