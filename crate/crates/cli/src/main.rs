//! `tpm`: batch command line for the activity-travel pattern pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use travel_patterns::config::RunConfig;
use travel_patterns::pipeline::{run_command, write_synthetic_inputs, Command, RunSummary};
use travel_patterns::synth::{default_archetypes, PopulationConfig};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "tpm", version, about = "Mine activity-travel patterns from categorized time series")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic population in the raw input formats plus a config.
    Synth(SynthArgs),
    /// Parse, clean and bin the raw inputs into series.csv.
    Ingest(StageArgs),
    /// Features, distances, clustering and validity (ingests first if needed).
    Cluster(StageArgs),
    /// Activity shares and demographic tables from cluster artifacts.
    Report(StageArgs),
    /// Every stage in order.
    Run(StageArgs),
    /// Check a config without running anything.
    ValidateConfig {
        #[arg(short, long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long, env = "TPM_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving activities.csv, profiles.csv, truth.csv and config.toml.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    per_spec: usize,
    #[arg(long, default_value_t = 7)]
    days: u32,
    /// Bin length in minutes.
    #[arg(long, default_value_t = 10)]
    granularity: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load(args: &StageArgs) -> Result<RunConfig, String> {
    let mut config = RunConfig::load(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn print_summary(summary: &RunSummary) {
    println!("output: {}", summary.output_dir.display());
    if let Some(n) = summary.persons {
        println!("persons: {n}");
    }
    if let Some(k) = summary.k {
        println!("clusters: {k}");
    }
    if let Some(v) = &summary.validity {
        if let Some(k) = v.selection.chosen_k {
            println!("validity-selected k: {k}");
        }
        if let Some(ari) = v.ari_vs_truth {
            println!("ari vs truth: {ari:.4}");
        }
    }
}

fn stage(args: &StageArgs, command: Command) -> ExitCode {
    let config = match load(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run_command(&config, command) {
        Ok(summary) => {
            print_summary(&summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn synth(args: &SynthArgs) -> ExitCode {
    let population = PopulationConfig {
        per_spec: args.per_spec,
        days: args.days,
        granularity: args.granularity,
        seed: args.seed,
        ..PopulationConfig::default()
    };
    match write_synthetic_inputs(&args.out, &default_archetypes(), &population) {
        Ok(_) => {
            println!("wrote synthetic inputs and config.toml to {}", args.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn validate(path: &Path) -> ExitCode {
    match RunConfig::load(path) {
        Ok(_) => {
            println!("{}: ok", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("config error: {}: {e}", path.display());
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match &cli.command {
        Cmd::Synth(args) => synth(args),
        Cmd::Ingest(args) => stage(args, Command::Ingest),
        Cmd::Cluster(args) => stage(args, Command::Cluster),
        Cmd::Report(args) => stage(args, Command::Report),
        Cmd::Run(args) => stage(args, Command::Run),
        Cmd::ValidateConfig { config } => validate(config),
    }
}
