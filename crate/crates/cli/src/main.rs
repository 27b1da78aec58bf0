use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dppo_core::harness::{cmd_generate, cmd_report, cmd_run, ExperimentConfig, Mode, RunOutput};
use dppo_core::DppoError;
use tracing_subscriber::EnvFilter;

/// Alternating RL / SFT training experiments on a synthetic skill suite.
#[derive(Parser, Debug)]
#[command(name = "dppo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured task suite as JSON lines.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output suite file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configured seed and write histories, logs and reports.
    Run(RunArgs),
    /// Build comparison and learning-curve tables from a run directory.
    Report {
        /// Run directory holding one sub-directory per mode.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the preference-learning checks.
    Prefcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// One of dppo, rl_only, sft_only, prefcheck.
    #[arg(long)]
    mode: Option<Mode>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Number of metaloop iterations.
    #[arg(long)]
    loops: Option<usize>,
}

fn load(path: Option<&PathBuf>) -> Result<ExperimentConfig, DppoError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_run(output: &RunOutput) {
    match output {
        RunOutput::Training { mode, seeds } => {
            println!("mode {mode}");
            println!("seed  heldout_before  heldout_after  general_before  general_after  budget");
            for s in seeds {
                println!(
                    "{:<5} {:>14.4} {:>14.4} {:>15.4} {:>14.4} {:>7}",
                    s.seed,
                    s.initial_heldout,
                    s.final_heldout,
                    s.general_before,
                    s.general_after,
                    s.rollouts + s.grad_evals
                );
            }
        }
        RunOutput::Prefcheck(rows) => {
            for r in rows {
                let verdict = if r.pass { "pass" } else { "FAIL" };
                println!(
                    "{verdict}  {:<30} {:.3e} (threshold {:.1e})",
                    r.check, r.statistic, r.threshold
                );
            }
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Generate { config, out } => {
            let config = load(config.as_ref())?;
            let n = cmd_generate(&config, &out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {n} samples to {}", out.display());
            Ok(true)
        }
        Command::Run(args) => {
            let mut config = load(args.config.as_ref())?;
            if let Some(out) = args.out {
                config.out_dir = out;
            }
            if let Some(mode) = args.mode {
                config.mode = mode;
            }
            if let Some(seeds) = args.seeds {
                config.seeds = seeds;
            }
            if let Some(loops) = args.loops {
                config.loop_config.loops = loops;
            }
            let output = cmd_run(&config)?;
            print_run(&output);
            Ok(match &output {
                RunOutput::Prefcheck(rows) => rows.iter().all(|r| r.pass),
                RunOutput::Training { .. } => true,
            })
        }
        Command::Report { out } => {
            let (rows, curves) = cmd_report(&out)?;
            println!("mode      seeds  heldout_mean  heldout_std  retention_mean");
            for r in &rows {
                match (r.present, r.heldout_mean, r.heldout_std, r.retention_mean) {
                    (true, Some(h), Some(s), Some(ret)) => {
                        println!(
                            "{:<9} {:>5} {:>13.4} {:>12.4} {:>15.4}",
                            r.mode, r.seeds, h, s, ret
                        )
                    }
                    _ => println!("{:<9} absent", r.mode),
                }
            }
            println!(
                "{} curve rows written to {}",
                curves.len(),
                out.join("curves.csv").display()
            );
            Ok(true)
        }
        Command::Prefcheck { config, out } => {
            let mut config = load(config.as_ref())?;
            config.mode = Mode::Prefcheck;
            if let Some(out) = out {
                config.out_dir = out;
            }
            let output = cmd_run(&config)?;
            print_run(&output);
            Ok(matches!(&output, RunOutput::Prefcheck(rows) if rows.iter().all(|r| r.pass)))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error =
                matches!(err.downcast_ref::<DppoError>(), Some(DppoError::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
