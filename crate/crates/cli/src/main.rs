//! `pqfl`: key generation, federated training runs, signature benchmarks
//! and report summaries.

mod commands;
mod config;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pqfl::channel::AttackConfig;
use pqfl::protocol::Transport;
use pqfl::sig::ParameterSet;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pqfl", version, about = "Federated averaging with post-quantum signed model exchange")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate one key pair per participant (server id 0, clients 1..=M).
    Keygen(KeygenArgs),
    /// Run federated training with signed model exchange.
    Run(RunArgs),
    /// Time keygen, sign and verify per scheme and payload size.
    Bench(BenchArgs),
    /// Summarise a run or bench CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct KeygenArgs {
    /// Scheme family: dilithium, falcon, sphincsplus or test.
    #[arg(long, default_value = "dilithium")]
    scheme: String,
    /// Specific parameter set, e.g. ML-DSA-65 or Falcon-512.
    #[arg(long)]
    param_set: Option<ParameterSet>,
    #[arg(long, default_value_t = 10)]
    clients: u32,
    /// Directory for the key files and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Seed for schemes with deterministic key generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Refuse non-post-quantum schemes.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Master seed; every random choice in the run derives from it.
    #[arg(long)]
    seed: u64,
    /// `key = value` file with the same keys as the long flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scheme family, a comma-separated list, or `all` (the three
    /// post-quantum schemes).
    #[arg(long, default_value = "dilithium")]
    scheme: String,
    /// Specific parameter set; only with a single scheme.
    #[arg(long)]
    param_set: Option<ParameterSet>,
    #[arg(long, default_value_t = 10)]
    clients: usize,
    #[arg(long, default_value_t = 10)]
    rounds: u32,
    #[arg(long, default_value_t = 1)]
    local_epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Learning rate [default: 1e-2 for sgd, 1e-5 for adamw].
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long, value_enum, default_value = "sgd")]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f32,
    #[arg(long, value_enum, default_value = "synthetic")]
    dataset: DatasetKind,
    /// IDX image file (with --dataset idx).
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file (with --dataset idx).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Use only the first N IDX samples.
    #[arg(long)]
    subset: Option<usize>,
    /// Synthetic sample count.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Synthetic feature count.
    #[arg(long, default_value_t = 32)]
    features: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Spread of the synthetic class centres.
    #[arg(long, default_value_t = 1.0)]
    separation: f32,
    /// Hidden layer width; 0 trains multinomial logistic regression.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Attack spec `kind[:key=value]...`, e.g. `bitflip:target=1:p=1.0`.
    #[arg(long, default_value = "none")]
    attack: AttackConfig,
    /// `inprocess` or `tcp:HOST:PORT`.
    #[arg(long, default_value = "inprocess", value_parser = parse_transport)]
    transport: Transport,
    /// Refuse non-post-quantum schemes.
    #[arg(long)]
    strict: bool,
    /// Skip signature checks (unsecured baseline).
    #[arg(long)]
    no_verify: bool,
    /// Sign payloads only, without the header.
    #[arg(long)]
    payload_only_signatures: bool,
    /// Metrics CSV path.
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated scheme families or parameter sets, or `all`.
    #[arg(long, default_value = "all")]
    schemes: String,
    /// Comma-separated payload sizes in bytes.
    #[arg(long, value_delimiter = ',', default_value = "1024,1048576")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    iters: usize,
    /// Write the records to this CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// CSV written by `run` or `bench`.
    csv: PathBuf,
}

fn parse_transport(s: &str) -> Result<Transport, String> {
    if s == "inprocess" || s == "in-process" {
        return Ok(Transport::InProcess);
    }
    let addr = s
        .strip_prefix("tcp:")
        .ok_or_else(|| format!("expected `inprocess` or `tcp:HOST:PORT`, got {s:?}"))?;
    addr.parse::<SocketAddr>()
        .map_err(|e| format!("bad address {addr:?}: {e}"))?;
    Ok(Transport::Tcp(addr.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PQFL_LOG", "error")).init();
    let args: Vec<OsString> = std::env::args_os().collect();
    let result = config::expand(args).and_then(|args| {
        let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
        match cli.command {
            Command::Keygen(a) => commands::keygen(&a),
            Command::Run(a) => commands::run(&a),
            Command::Bench(a) => commands::bench(&a),
            Command::Report(a) => commands::report(&a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
