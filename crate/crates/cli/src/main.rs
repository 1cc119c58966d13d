//! `pipesim`: validate, simulate and estimate pipeline-parallel training runs.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pipesim::config::{AttentionMode, Preset};

use commands::{CliError, EstimateOptions, SimulateOptions, Source};
use report::Format;

#[derive(Debug, Parser)]
#[command(name = "pipesim", version, about = "Pipeline-parallel training simulator and MFU estimator")]
struct Cli {
    /// Built-in model and parallelism configuration.
    #[arg(long, global = true, conflicts_with = "config", value_parser = parse_preset)]
    preset: Option<Preset>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OutputFormat {
    Text,
    Tsv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a configuration's invariants.
    Validate,
    /// Run the discrete-event simulation and report memory and timing.
    Simulate(SimulateArgs),
    /// Predict whole-model MFU and speedup from single-stage MFU.
    Estimate(EstimateArgs),
    /// Simulate a list of micro-batch sizes.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    bpipe: Option<Toggle>,
    #[arg(long)]
    micro_batch: Option<u64>,
    #[arg(long, value_parser = parse_attention)]
    attention: Option<AttentionMode>,
    /// Write a Chrome trace to this path.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the per-device memory series to this path.
    #[arg(long)]
    mem_dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    b_from: u64,
    #[arg(long)]
    mfu_stage_from: Option<String>,
    #[arg(long)]
    b_to: u64,
    #[arg(long)]
    mfu_stage_to: Option<String>,
    /// Global batch size.
    #[arg(long = "B")]
    global_batch: Option<u64>,
    /// Pipeline stages.
    #[arg(long = "p")]
    pipeline: Option<u64>,
    /// Observed whole-model MFU at `--b-from`.
    #[arg(long)]
    observed_from: Option<String>,
    /// Observed whole-model MFU at `--b-to`.
    #[arg(long)]
    observed_to: Option<String>,
    /// File of `b mfu_stage` lines.
    #[arg(long)]
    measurements: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    b_list: Vec<u64>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse()
}

fn parse_attention(s: &str) -> Result<AttentionMode, String> {
    s.parse()
}

fn source(cli: &Cli) -> Option<Source> {
    match (&cli.preset, &cli.config) {
        (Some(p), _) => Some(Source::Preset(*p)),
        (None, Some(path)) => Some(Source::File(path.clone())),
        (None, None) => None,
    }
}

fn require(source: Option<Source>) -> Result<Source, CliError> {
    source.ok_or_else(|| CliError::Usage("one of --preset or --config is required".into()))
}

fn run(cli: &Cli) -> Result<report::Report, CliError> {
    let source = source(cli);
    match &cli.command {
        Command::Validate => commands::cmd_validate(&require(source)?),
        Command::Simulate(a) => {
            let opts = SimulateOptions {
                bpipe: a.bpipe.map(|t| matches!(t, Toggle::On)),
                micro_batch: a.micro_batch,
                attention: a.attention,
                trace: a.trace.clone(),
                mem_dump: a.mem_dump.clone(),
            };
            commands::cmd_simulate(&require(source)?, &opts)
        }
        Command::Estimate(a) => {
            let opts = EstimateOptions {
                b_from: a.b_from,
                b_to: a.b_to,
                mfu_stage_from: a.mfu_stage_from.clone(),
                mfu_stage_to: a.mfu_stage_to.clone(),
                global_batch: a.global_batch,
                pipeline: a.pipeline,
                observed_from: a.observed_from.clone(),
                observed_to: a.observed_to.clone(),
                measurements: a.measurements.clone(),
            };
            commands::cmd_estimate(source.as_ref(), &opts)
        }
        Command::Sweep(a) => commands::cmd_sweep(&require(source)?, &a.b_list),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let format = match cli.format {
        OutputFormat::Text => Format::Text,
        OutputFormat::Tsv => Format::Tsv,
    };
    match run(&cli) {
        Ok(report) => {
            print!("{}", report.render(format));
            ExitCode::SUCCESS
        }
        Err(err) => {
            match &err {
                CliError::Invalid(violations) => {
                    for v in violations {
                        eprintln!("violation: {v}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
