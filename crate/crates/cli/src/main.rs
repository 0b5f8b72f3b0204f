use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mapkd_cli::{Arm, CliError, Overrides, Run, RunConfig, Stage};

#[derive(Debug, Parser)]
#[command(name = "mapkd", version, about = "Clustered multi-teacher distillation pipeline for memory access prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "mapkd.toml")]
    config: PathBuf,

    /// Run directory; overrides MAPKD_OUT and the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Global seed; overrides MAPKD_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Consume artifacts stamped with a different config hash.
    #[arg(long, global = true)]
    force: bool,

    /// Restrict to these arms (repeatable).
    #[arg(long = "arm", global = true)]
    arms: Vec<Arm>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or import the trace.
    Gen,
    /// Fit k-means, assign clusters, build datasets.
    Cluster,
    /// Train one teacher per cluster.
    TrainTeachers,
    /// Distill the per-cluster teachers into a student.
    Distill,
    /// Train the student-only, teacher-only and standard-KD baselines.
    Baselines,
    /// Score every arm on the evaluation region.
    Eval,
    /// Write report.md from metrics.json.
    Report,
    /// Run every stage in order.
    All,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        arms: cli.arms,
    };
    let cfg = RunConfig::load(&cli.config, &overrides)?;
    let run = Run::new(cfg, cli.force)?;
    let stage = match cli.command {
        Command::Gen => Stage::Gen,
        Command::Cluster => Stage::Cluster,
        Command::TrainTeachers => Stage::TrainTeachers,
        Command::Distill => Stage::Distill,
        Command::Baselines => Stage::Baselines,
        Command::Eval => Stage::Eval,
        Command::Report => Stage::Report,
        Command::All => return run.run_all(),
    };
    run.run(stage)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
