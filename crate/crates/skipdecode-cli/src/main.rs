//! Command-line surface for the skipdecode engine.
//!
//! Every run writes its outputs plus exactly one `manifest.json` (resolved
//! config, seed, input/output paths, build id, wall time, exit status) into
//! the chosen output directory. All metrics land in files so downstream
//! tooling parses artifacts rather than terminal output.

mod commands;
mod config;

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args, Clone)]
pub struct SharedArgs {
    /// Seed for every random choice in the run
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON config file; keys mirror long flag names (flag > file > default)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for outputs and the run manifest
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Numeric precision of model state
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Parser)]
#[command(
    name = "skipdecode",
    about = "Budgeted layer-skipping decoder: schedules, training, generation, benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Inspect an exit-budget schedule (preset or explicit bounds)
    Schedule(commands::schedule::ScheduleArgs),
    /// Train a model on a corpus (or a generated synthetic one)
    Train(commands::train::TrainArgs),
    /// Decode prompts under a policy
    Generate(commands::generate::GenerateArgs),
    /// Compare policies and speedups on one checkpoint
    Bench(commands::bench::BenchArgs),
    /// Export the per-position loss curve of a checkpoint
    #[command(name = "loss-curve")]
    LossCurve(commands::loss_curve::LossCurveArgs),
}

/// What a command hands back for the manifest.
pub struct Outcome {
    pub resolved_config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    build_id: String,
    wall_time_ms: f64,
    exit_status: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn build_id() -> String {
    format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

fn main() {
    let cli = Cli::parse();
    let started = Instant::now();

    let (name, shared) = match &cli.command {
        Command::Schedule(a) => ("schedule", a.shared.clone()),
        Command::Train(a) => ("train", a.shared.clone()),
        Command::Generate(a) => ("generate", a.shared.clone()),
        Command::Bench(a) => ("bench", a.shared.clone()),
        Command::LossCurve(a) => ("loss-curve", a.shared.clone()),
    };
    if let Err(e) = std::fs::create_dir_all(&shared.out_dir) {
        eprintln!("error: cannot create {}: {e}", shared.out_dir.display());
        std::process::exit(1);
    }

    let result: Result<Outcome> = match cli.command {
        Command::Schedule(args) => commands::schedule::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Generate(args) => commands::generate::run(args),
        Command::Bench(args) => commands::bench::run(args),
        Command::LossCurve(args) => commands::loss_curve::run(args),
    };

    let wall_time_ms = started.elapsed().as_secs_f64() * 1000.0;
    let (manifest, code) = match result {
        Ok(outcome) => (
            RunManifest {
                command: name.to_string(),
                config: outcome.resolved_config,
                seed: shared.seed,
                inputs: outcome.inputs.iter().map(|p| p.display().to_string()).collect(),
                outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
                build_id: build_id(),
                wall_time_ms,
                exit_status: 0,
                error: None,
            },
            0,
        ),
        Err(e) => {
            eprintln!("error: {e:#}");
            (
                RunManifest {
                    command: name.to_string(),
                    config: serde_json::Value::Null,
                    seed: shared.seed,
                    inputs: Vec::new(),
                    outputs: Vec::new(),
                    build_id: build_id(),
                    wall_time_ms,
                    exit_status: 1,
                    error: Some(format!("{e:#}")),
                },
                1,
            )
        }
    };

    let manifest_path = shared.out_dir.join("manifest.json");
    if let Ok(json) = serde_json::to_string_pretty(&manifest) {
        let _ = std::fs::write(&manifest_path, json);
    }
    std::process::exit(code);
}
