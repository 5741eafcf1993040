use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{cmd_evaluate, cmd_export_plots, cmd_fit, cmd_generate, cmd_synthesize, Loaded};
use crate::error::{exit, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "fpd", version, about = "KL-optimal constrained policy synthesis from demonstrations")]
pub struct Cli {
    /// Worker threads for rollouts (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Overrides the `seed` key of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic trajectory dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate closed-loop and reference factors from a dataset.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize the optimal policy from fitted factors.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        factors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a policy and simulate rollouts; writes a JSON report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        factors: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export control and state densities as CSV series.
    ExportPlots {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        factors: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // A pool may already exist when called more than once in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Generate { config, out } => cmd_generate(&Loaded::read(config, cli.seed)?, out),
        Command::Fit { config, data, out } => cmd_fit(&Loaded::read(config, cli.seed)?, data, out),
        Command::Synthesize { config, factors, out } => cmd_synthesize(&Loaded::read(config, cli.seed)?, factors, out),
        Command::Evaluate {
            config,
            factors,
            policy,
            out,
        } => cmd_evaluate(&Loaded::read(config, cli.seed)?, factors, policy, out),
        Command::ExportPlots {
            config,
            factors,
            policy,
            out,
        } => cmd_export_plots(&Loaded::read(config, cli.seed)?, factors, policy, out),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    match execute(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("fpd: {e}");
            e.exit_code()
        }
    }
}
