//! `osmosim` command-line front end.

mod ppb;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "osmosim", version, about = "Cycle-stepped multi-tenant SmartNIC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a preset or scenario file and write CSV and text reports.
    Run(RunArgs),
    /// List the built-in scenario presets.
    Presets,
    /// Print the per-packet budget table for the builtin kernels.
    Ppb(PpbArgs),
    /// Export the generated packet trace of a scenario.
    Trace(TraceArgs),
}

/// Where the scenario comes from; exactly one source is allowed.
#[derive(Debug, Args)]
#[group(required = false, multiple = false)]
pub struct ScenarioSource {
    /// Built-in preset name (see `osmosim presets`).
    #[arg(long)]
    pub preset: Option<String>,
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
}

/// Flags that override fields of the configuration file.
#[derive(Debug, Args)]
pub struct SimFlags {
    /// Simulator configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// PU scheduler: wlbvt or rr.
    #[arg(long)]
    pub sched: Option<String>,
    /// Transfer fragmentation: none, software or hardware.
    #[arg(long)]
    pub frag: Option<String>,
    /// Fragment size in bytes, or "off".
    #[arg(long)]
    pub frag_size: Option<String>,
    /// RNG seed; falls back to the config file, then OSMOSIM_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cycle limit per run.
    #[arg(long)]
    pub cycles: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    #[command(flatten)]
    pub sim: SimFlags,
    /// Replay a packet trace instead of generating one.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Run the scheduler x fragmentation grid and write delta summaries.
    #[arg(long)]
    pub compare: bool,
    /// Output directory.
    #[arg(short = 'o', long = "out")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PpbArgs {
    /// Number of PUs sharing the budget.
    #[arg(long, default_value_t = 32)]
    pub pus: u32,
    /// Packet sizes in bytes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![64u32, 256, 1024, 4096])]
    pub sizes: Vec<u32>,
    /// Link bandwidth in bits per second.
    #[arg(long, default_value_t = 400e9)]
    pub bandwidth: f64,
    /// Simulator configuration file used for kernel timing parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    #[command(flatten)]
    pub sim: SimFlags,
    /// Output file; standard output when absent.
    #[arg(short = 'o', long = "out")]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::cmd_run(&args),
        Command::Presets => {
            for name in osmosim::preset_names() {
                println!("{name}");
            }
            Ok(())
        }
        Command::Ppb(args) => ppb::cmd_ppb(&args),
        Command::Trace(args) => run::cmd_trace(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("osmosim: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
