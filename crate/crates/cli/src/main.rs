use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use addlc_cli::experiment::{self, REFERENCE_FILE};
use addlc_cli::{exit_code, ExperimentConfig};
use addlc_core::Variant;

#[derive(Parser)]
#[command(
    name = "addlc",
    version,
    about = "Additive-combination compression of neural networks"
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured LC variant.
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Qp,
    Al,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference model and save it.
    TrainRef,
    /// Train (or load) the reference and compress it.
    Compress,
    /// Compress once per sweep value and write the tradeoff table.
    Sweep,
    /// Storage and FLOP metrics of a compressed model file.
    Report {
        #[arg(long)]
        model: PathBuf,
    },
    /// Loss and test error of a compressed model file.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(v) = cli.variant {
        cfg.lc.variant = match v {
            VariantArg::Qp => Variant::QuadraticPenalty,
            VariantArg::Al => Variant::AugmentedLagrangian,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ADDLC_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("ADDLC_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    let cfg = load(cli)?;
    let out: &Path = &cfg.output.dir;
    match &cli.command {
        Command::TrainRef => {
            let (spec, splits) = experiment::prepare(&cfg)?;
            let store = experiment::train_reference(&cfg, &spec, &splits)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join(REFERENCE_FILE), serde_json::to_vec(&store)?)?;
            print_json(&experiment::summarize_reference(&spec, &store, &splits)?)
        }
        Command::Compress => print_json(&experiment::run_experiment(&cfg, out)?),
        Command::Sweep => {
            let reports = experiment::run_sweep(&cfg, out)?;
            let rows: Vec<_> = reports.iter().map(|r| r.row()).collect();
            print_json(&rows)
        }
        Command::Report { model } => print_json(&experiment::report_container(&cfg, model)?),
        Command::Eval { model } => {
            let (loss, test_error) = experiment::evaluate_container(&cfg, model)?;
            print_json(&serde_json::json!({ "loss": loss, "test_error": test_error }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
