use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use eqspike::config::RunConfig;
use eqspike::run::{run, Command};
use eqspike::CliResult;

/// Simulate, train, distill and profile equilibrium spiking transformer encoders.
#[derive(Debug, Parser)]
#[command(name = "eqspike", version)]
struct Cli {
    command: Command,
    /// JSON run config or a previous run's manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "eqspike-out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Step budget of every convergence criterion.
    #[arg(long)]
    t_conv: Option<usize>,
    /// Firing threshold of the model in use.
    #[arg(long)]
    v_th: Option<f64>,
    /// Student checkpoint to evaluate or continue from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Trained teacher checkpoint for `distill`.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.t_conv.is_some() {
        cfg.t_conv = cli.t_conv;
    }
    if cli.v_th.is_some() {
        cfg.v_th = cli.v_th;
    }
    if cli.checkpoint.is_some() {
        cfg.checkpoint = cli.checkpoint.clone();
    }
    if cli.teacher.is_some() {
        cfg.teacher_checkpoint = cli.teacher.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match resolve(&cli).and_then(|cfg| run(cli.command, cfg, &cli.out)) {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
