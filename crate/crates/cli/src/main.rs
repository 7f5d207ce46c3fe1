use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use collabtrace_core::decomposition;
use collabtrace_core::pipeline;

#[derive(Parser)]
#[command(
    name = "collabtrace",
    version,
    about = "Subtask traversal and report usage metrics for human-AI collaboration transcripts"
)]
struct Cli {
    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage in order.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
    },
    /// Run a single stage. Upstream artifacts must already exist.
    Stage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: String,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
    },
    /// Check a decomposition file and print its violations as JSON.
    ValidateDecomposition { path: PathBuf },
    /// Rebuild the exported metric table from existing metrics artifacts.
    Export {
        #[arg(long)]
        config: PathBuf,
    },
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn report_stage(result: Result<PathBuf, pipeline::StageError>) -> anyhow::Result<ExitCode> {
    match result {
        Ok(out) => {
            log::info!("artifacts in {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(1))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    let result = match cli.command {
        Command::Run { config, workers } => report_stage(pipeline::run(&config, workers)),
        Command::Stage { config, stage, workers } => report_stage(pipeline::stage(&config, &stage, workers)),
        Command::Export { config } => report_stage(pipeline::stage(&config, "export", 1)),
        Command::ValidateDecomposition { path } => validate_decomposition(&path),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(1)
    })
}

fn validate_decomposition(path: &PathBuf) -> anyhow::Result<ExitCode> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let d = decomposition::load_decomposition(file).with_context(|| format!("cannot load {}", path.display()))?;
    let report = d.validate();
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.is_valid() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
