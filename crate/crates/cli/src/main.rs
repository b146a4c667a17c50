//! Command-line runner for the widenet experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use widenet::harness::{run_and_write, ExperimentConfig, ExperimentKind};
use widenet::numerics::configure_threads;

#[derive(Parser)]
#[command(name = "widenet", version, about = "Finite-width vs infinite-width linear network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predictor error against width, with a log-log slope fit.
    SweepWidth(Common),
    /// Output-layer second moment against its limit.
    TrackParams(Common),
    /// Predictor paths projected on the first two coordinates.
    Trajectory(Common),
    /// Histograms and kurtosis of the trained output layer.
    Histogram(Common),
    /// Gradient flow of the limit system and its endpoint.
    ImplicitBias(Common),
    /// Orthonormality, enumeration, recursion and moment checks.
    BasisVerify(Common),
    /// Deep-network ladders, relations and convergence.
    MultilayerVerify(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration; absent keys take the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

impl Command {
    fn split(self) -> (ExperimentKind, Common) {
        match self {
            Command::SweepWidth(c) => (ExperimentKind::SweepWidth, c),
            Command::TrackParams(c) => (ExperimentKind::TrackParams, c),
            Command::Trajectory(c) => (ExperimentKind::Trajectory, c),
            Command::Histogram(c) => (ExperimentKind::Histogram, c),
            Command::ImplicitBias(c) => (ExperimentKind::ImplicitBias, c),
            Command::BasisVerify(c) => (ExperimentKind::BasisVerify, c),
            Command::MultilayerVerify(c) => (ExperimentKind::MultilayerVerify, c),
        }
    }
}

fn execute(kind: ExperimentKind, args: Common) -> widenet::Result<()> {
    configure_threads(args.threads)?;
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(kind, path)?,
        None => ExperimentConfig::defaults(kind),
    };
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    let out = args.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out").join(kind.name()));
    // The manifest echoes the directory actually written.
    cfg.out = Some(out.clone());
    cfg.validate()?;
    let summary = run_and_write(&cfg, &out)?;
    println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let (kind, args) = Cli::parse().command.split();
    match execute(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                widenet::Error::Config(_) | widenet::Error::Json(_) => 2,
                _ => 1,
            })
        }
    }
}
