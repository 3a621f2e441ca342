mod commands;
mod config;
mod rundir;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use loco_core::{Error, TaskId};

#[derive(Parser)]
#[command(name = "loco", version, about = "Continual 3D segmentation with low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and freeze the base model on task 0.
    TrainBase {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `seeds.model`.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `out` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add one continual task to a trained run.
    Continue {
        /// Defaults to the config recorded in the checkpoint manifest.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: u32,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fused whole-body segmentation of one volume file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out metrics of every trained task plus the parameter budget.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the held-out volumes of one task to `<out>/volumes`.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest {
        /// Also write the results to `<out>/reports/selftest.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Process exit codes, one per failure family.
mod exit {
    pub const OTHER: u8 = 1;
    pub const MISSING_FILE: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const CHECKPOINT: u8 = 5;
    pub const CONFLICT: u8 = 6;
    pub const SELFTEST: u8 = 7;
    pub const CONTRACT: u8 = 8;
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Parse { .. } | Error::Recipe(_) => exit::CONFIG,
                Error::Checkpoint(_) => exit::CHECKPOINT,
                Error::Conflict(_) => exit::CONFLICT,
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => exit::MISSING_FILE,
                Error::Io { .. } => exit::OTHER,
                _ => exit::CONTRACT,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return exit::MISSING_FILE;
            }
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return exit::CONFIG;
        }
    }
    exit::OTHER
}

fn selftest(out: Option<PathBuf>) -> anyhow::Result<bool> {
    let checks = selftest::run();
    let mut text = String::new();
    for c in &checks {
        text.push_str(&format!("[{}] {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    print!("{text}");
    if let Some(out) = out {
        rundir::write_file(&rundir::reports_dir(&out).join("selftest.txt"), text.as_bytes())?;
    }
    Ok(checks.iter().all(|c| c.pass))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainBase { config, seed, out } => commands::train_base(&config, seed, out).map(|_| true),
        Command::Continue { config, checkpoint, task, seed, out } => {
            commands::continue_task(config.as_deref(), &checkpoint, TaskId(task), seed, out).map(|_| true)
        }
        Command::Infer { checkpoint, volume, out } => commands::infer(&checkpoint, &volume, out).map(|_| true),
        Command::Report { checkpoint, out } => commands::report(&checkpoint, out).map(|_| true),
        Command::Synth { config, task, out } => commands::synth(&config, TaskId(task), out).map(|_| true),
        Command::Selftest { out } => selftest(out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: selftest failed");
            ExitCode::from(exit::SELFTEST)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
