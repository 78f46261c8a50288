//! `swcons`: synthesis, verification and simulation of observer-based
//! consensus protocols over Markov-switching topologies.
//!
//! Exit codes: 0 success, 1 input error, 2 infeasible or failed check,
//! 3 numerical blow-up.

mod commands;
mod config;
mod demo;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::Status;
use config::RunConfig;
use demo::DemoKind;

#[derive(Parser)]
#[command(name = "swcons", version, about = "Observer-based consensus over Markov-switching graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed for the switching paths (overrides simulation.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of Monte-Carlo paths (overrides simulation.paths).
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the LMI synthesis and write protocol.txt and certificate.txt.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Re-check a protocol file against the configured plant and network.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
    },
    /// Monte-Carlo simulation with per-path CSVs and report.txt.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Four-helicopter benchmark with embedded matrices.
    HelicopterDemo {
        #[arg(long, value_enum, default_value = "compare")]
        kind: DemoKind,
        #[arg(long, default_value = "helicopter-demo")]
        out: PathBuf,
        #[arg(long, default_value_t = switching_consensus::benchmark::PATH_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        paths: usize,
    },
}

fn load(path: &PathBuf, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(o) = &ov.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(p) = ov.paths {
        if p == 0 {
            anyhow::bail!("--paths must be at least 1");
        }
        cfg.paths = p;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Synthesize { config, ov } => commands::cmd_synthesize(&load(&config, &ov)?),
        Command::Verify { config, protocol } => {
            let cfg = RunConfig::load(&config)?;
            commands::cmd_verify(&cfg, &protocol)
        }
        Command::Simulate {
            config,
            protocol,
            ov,
        } => commands::cmd_simulate(&load(&config, &ov)?, &protocol),
        Command::HelicopterDemo {
            kind,
            out,
            seed,
            paths,
        } => {
            if paths == 0 {
                anyhow::bail!("--paths must be at least 1");
            }
            demo::cmd_helicopter_demo(kind, &out, seed, paths)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(status) => ExitCode::from(status as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(Status::InputError as u8)
        }
    }
}
