use std::path::PathBuf;
use std::process::ExitCode;

use acdc_cli::report::report;
use acdc_cli::tasks::run;
use acdc_cli::{CliError, CliResult, ExperimentConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "acdc", version, about = "Sparse training experiments: IHT, AC/DC, FLOPs and diagnostics")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the config's list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write synthetic datasets with a provenance sidecar.
    Generate,
    /// Run (stochastic) IHT on a least-squares problem.
    RunIht,
    /// Train an MLP with alternating compressed/decompressed phases.
    TrainAcdc,
    /// Count inference and training FLOPs for a layer manifest.
    Flops,
    /// AC/DC training with corrupted labels, agreement and dead weights.
    Diagnose,
    /// Render plot CSVs from a run directory and check its summary.
    Report,
    /// Run whatever task the config names.
    Run,
}

impl Command {
    fn task_name(self) -> Option<&'static str> {
        match self {
            Command::Generate => Some("generate"),
            Command::RunIht => Some("run-iht"),
            Command::TrainAcdc => Some("train-acdc"),
            Command::Flops => Some("flops"),
            Command::Diagnose => Some("diagnose"),
            Command::Report | Command::Run => None,
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::field("--config", "a config file is required"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> CliResult<()> {
    if cli.command == Command::Report {
        let out = match &cli.out {
            Some(o) => o.clone(),
            None => load_config(cli)?.out,
        };
        let r = report(&out)?;
        println!("{}", serde_json::to_string(&r.summary.median)?);
        log::info!("wrote {} plot rows to {}", r.step_rows, out.display());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    if let Some(want) = cli.command.task_name() {
        if cfg.task.name() != want {
            return Err(CliError::field(
                "task",
                format!("config describes `{}`, subcommand expects `{want}`", cfg.task.name()),
            ));
        }
    }
    let summary = run(&cfg)?;
    println!("{}", serde_json::to_string(&summary.median)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ACDC_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
