//! `mcusplit`: plan, simulate and verify split CNN inference across a fleet
//! of microcontrollers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::EquivalenceFailure;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "mcusplit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rate the fleet, split every layer and write the plan and per-worker fragments.
    Plan {
        #[command(flatten)]
        cfg: ExperimentConfig,
    },
    /// Execute one inference on the simulated fleet and verify it against the oracle.
    Run {
        #[command(flatten)]
        cfg: ExperimentConfig,
    },
    /// Peak per-worker RAM for homogeneous fleets of increasing size.
    SweepMemory {
        #[command(flatten)]
        cfg: ExperimentConfig,
        /// Clock frequency of every swept worker, in MHz.
        #[arg(long, default_value_t = 600.0)]
        frequency_mhz: f64,
        /// RAM budget of every swept worker, in KB.
        #[arg(long, default_value_t = 512.0)]
        ram_kb: f64,
    },
    /// Predicted inference time of each strategy on the emulated three-worker cases.
    Compare {
        #[command(flatten)]
        cfg: ExperimentConfig,
        /// Cases to run, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
        cases: Vec<u8>,
    },
    /// Activation traffic of a float model and its int8 quantization.
    Traffic {
        #[command(flatten)]
        cfg: ExperimentConfig,
    },
    /// Fit a K1 table from `frequency_mhz,workload_kb,time_s` records.
    Calibrate {
        /// CSV file of measurements.
        #[arg(long)]
        records: PathBuf,
        /// Where to write the table; stdout when omitted.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Write a seeded synthetic model file.
    GenModel {
        /// tiny_cnn, mobilenet_v2_like or custom.
        #[arg(long, default_value = "tiny_cnn")]
        preset: String,
        /// Layer recipes for `custom`, separated by `;`, e.g. `conv:out=8,k=3,p=1,act=relu;gap;linear:out=10`.
        #[arg(long)]
        layers: Option<String>,
        /// Input shape for `custom`, as CxHxW.
        #[arg(long)]
        input: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the model; stdout when omitted.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Dense single-device inference, optionally with the brute-force input
    /// dependencies of one neuron.
    Oracle {
        #[command(flatten)]
        cfg: ExperimentConfig,
        /// `LAYER:NEURON` whose dependencies to list.
        #[arg(long, value_parser = parse_probe)]
        probe: Option<(usize, usize)>,
    },
}

fn parse_probe(text: &str) -> Result<(usize, usize), String> {
    let (l, n) = text.split_once(':').ok_or("expected LAYER:NEURON")?;
    Ok((l.parse().map_err(|_| "bad layer")?, n.parse().map_err(|_| "bad neuron")?))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Plan { cfg } => commands::plan(&cfg.resolve()?),
        Command::Run { cfg } => commands::run(&cfg.resolve()?),
        Command::SweepMemory { cfg, frequency_mhz, ram_kb } => commands::sweep_memory(&cfg.resolve()?, frequency_mhz, ram_kb),
        Command::Compare { cfg, cases } => commands::compare(&cfg.resolve()?, &cases),
        Command::Traffic { cfg } => commands::traffic(&cfg.resolve()?),
        Command::Calibrate { records, output } => commands::calibrate(&records, output.as_deref()),
        Command::GenModel { preset, layers, input, seed, output } => {
            commands::gen_model(&preset, layers.as_deref(), input.as_deref(), seed, output.as_deref())
        }
        Command::Oracle { cfg, probe } => commands::oracle(&cfg.resolve()?, probe),
    }
}

/// 2 bad input, 3 infeasible plan, 4 out of memory or flash, 5 equivalence
/// failure, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use mcusplit::Error as E;
    if err.downcast_ref::<EquivalenceFailure>().is_some() {
        return 5;
    }
    match err.chain().find_map(|e| e.downcast_ref::<mcusplit::Error>()) {
        Some(E::Parse(_) | E::Json(_) | E::Csv(_) | E::Structural { .. } | E::UnsupportedOperator { .. } | E::Bounds(_) | E::Domain(_)) => 2,
        Some(E::InfeasibleCapacity { .. } | E::Allocation(_)) => 3,
        Some(E::OutOfMemory { .. } | E::Deployment { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
